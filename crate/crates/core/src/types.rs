//! Domain types shared by every stage of the backend.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Utterance identifier. Non-empty and free of tabs and newlines so it can
/// always be written as a TSV field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UtteranceId(String);

impl UtteranceId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidId(id));
        }
        Ok(UtteranceId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for UtteranceId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        UtteranceId::new(value)
    }
}

impl From<UtteranceId> for String {
    fn from(value: UtteranceId) -> Self {
        value.0
    }
}

impl fmt::Display for UtteranceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Build a list of ids from string slices, failing on the first invalid one.
pub fn ids<S: AsRef<str>>(names: &[S]) -> Result<Vec<UtteranceId>> {
    names.iter().map(|s| UtteranceId::new(s.as_ref())).collect()
}

/// Utterance ids plus an `N x dim` row-major matrix of finite `f32` values.
///
/// Storage is single precision (it is what goes on disk); every computation
/// over the rows widens to `f64` first.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<UtteranceId>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<UtteranceId>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                got: data.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id.to_string()));
            }
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                value: data[i] as f64,
                location: format!("row {} col {}", i / dim, i % dim),
            });
        }
        Ok(EmbeddingSet { ids, dim, data })
    }

    /// Build from `f64` rows, rounding to storage precision.
    pub fn from_rows(ids: Vec<UtteranceId>, dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != ids.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                got: rows.len(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend(row.iter().map(|&v| v as f32));
        }
        EmbeddingSet::new(ids, dim, data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[UtteranceId] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.row_f64(i)).collect()
    }

    pub fn index(&self) -> HashMap<&UtteranceId, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id, i)).collect()
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[UtteranceId]) -> Result<EmbeddingSet> {
        let index = self.index();
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let &i = index.get(id).ok_or_else(|| Error::MissingId(id.to_string()))?;
            data.extend_from_slice(self.row(i));
        }
        EmbeddingSet::new(ids.to_vec(), self.dim, data)
    }
}

/// Enrollment/test pairs with optional target labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialList {
    pairs: Vec<(UtteranceId, UtteranceId)>,
    labels: Option<Vec<bool>>,
}

impl TrialList {
    pub fn new(pairs: Vec<(UtteranceId, UtteranceId)>, labels: Option<Vec<bool>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != pairs.len() {
                return Err(Error::DimensionMismatch {
                    expected: pairs.len(),
                    got: l.len(),
                });
            }
        }
        Ok(TrialList { pairs, labels })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(UtteranceId, UtteranceId)] {
        &self.pairs
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn with_labels(&self, labels: Vec<bool>) -> Result<TrialList> {
        TrialList::new(self.pairs.clone(), Some(labels))
    }

    pub fn without_labels(&self) -> TrialList {
        TrialList {
            pairs: self.pairs.clone(),
            labels: None,
        }
    }
}

/// Per-trial scores aligned with a trial list.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    trials: TrialList,
    scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(trials: TrialList, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != trials.len() {
            return Err(Error::DimensionMismatch {
                expected: trials.len(),
                got: scores.len(),
            });
        }
        crate::error::ensure_finite(&scores, "scores")?;
        Ok(ScoreSet { trials, scores })
    }

    pub fn trials(&self) -> &TrialList {
        &self.trials
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Same scores attached to another trial list with identical pairs
    /// (typically the labeled version of the list they were computed on).
    pub fn relabel(&self, trials: &TrialList) -> Result<ScoreSet> {
        if trials.pairs() != self.trials.pairs() {
            return Err(Error::TrialMismatch);
        }
        ScoreSet::new(trials.clone(), self.scores.clone())
    }
}

/// Per-utterance integer labels (pseudo-speakers or true speakers) with
/// optional per-utterance training weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    ids: Vec<UtteranceId>,
    labels: Vec<usize>,
    n_clusters: usize,
    weights: Option<Vec<f64>>,
}

impl LabelSet {
    pub fn new(
        ids: Vec<UtteranceId>,
        labels: Vec<usize>,
        n_clusters: usize,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        if labels.len() != ids.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_clusters) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: n_clusters,
            });
        }
        if let Some(w) = &weights {
            if w.len() != ids.len() {
                return Err(Error::DimensionMismatch {
                    expected: ids.len(),
                    got: w.len(),
                });
            }
            if let Some(&bad) = w.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(format!("label weight {bad} outside [0, 1]")));
            }
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id.to_string()));
            }
        }
        Ok(LabelSet {
            ids,
            labels,
            n_clusters,
            weights,
        })
    }

    /// Labels with the cluster count taken as `max + 1`.
    pub fn from_labels(ids: Vec<UtteranceId>, labels: Vec<usize>) -> Result<Self> {
        let n = labels.iter().max().map_or(0, |m| m + 1);
        LabelSet::new(ids, labels, n, None)
    }

    pub fn ids(&self) -> &[UtteranceId] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_weights(&self, weights: Option<Vec<f64>>) -> Result<LabelSet> {
        LabelSet::new(self.ids.clone(), self.labels.clone(), self.n_clusters, weights)
    }

    /// Number of distinct label values actually used.
    pub fn n_used(&self) -> usize {
        self.labels.iter().collect::<HashSet<_>>().len()
    }

    /// Labels reordered to follow `ids`.
    pub fn aligned_to(&self, ids: &[UtteranceId]) -> Result<LabelSet> {
        if ids.len() != self.ids.len() {
            return Err(Error::IdMismatch(format!(
                "{} ids vs {} labels",
                ids.len(),
                self.ids.len()
            )));
        }
        let index: HashMap<&UtteranceId, usize> = self.ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
        let mut labels = Vec::with_capacity(ids.len());
        let mut weights = self.weights.as_ref().map(|_| Vec::with_capacity(ids.len()));
        for id in ids {
            let &i = index
                .get(id)
                .ok_or_else(|| Error::IdMismatch(format!("`{id}` has no label")))?;
            labels.push(self.labels[i]);
            if let (Some(w), Some(src)) = (weights.as_mut(), self.weights.as_ref()) {
                w.push(src[i]);
            }
        }
        LabelSet::new(ids.to_vec(), labels, self.n_clusters, weights)
    }
}
