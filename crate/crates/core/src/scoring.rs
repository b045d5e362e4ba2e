//! Cosine trial scoring, adaptive score normalization and score fusion.
//!
//! ZT-norm, step by step:
//!
//! 1. Z statistics of an enrollment utterance `e` come from its scores
//!    against the cohort, `score(e, c)`.
//! 2. Every cohort utterance `c` acting as a model gets its own Z
//!    statistics from `score(c, c')` over the rest of the cohort.
//! 3. For a test utterance `t` the cohort scores `score(c, t)` are
//!    Z-normalized with the statistics of `c` from step 2, and T statistics
//!    are taken over those normalized scores.
//! 4. A trial `(e, t)` with raw score `s` becomes
//!    `((s - mu_e) / sigma_e - mu_t) / sigma_t`.
//!
//! Each statistic is adaptive: the highest `drop_top` scores are discarded
//! and the next `use_top` are kept. A cohort entry with the same id as the
//! utterance being normalized is never scored against it.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedops::{self, DEFAULT_EPS_NORM};
use crate::error::{Error, Result};
use crate::types::{EmbeddingSet, ScoreSet, TrialList, UtteranceId};

pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub size: usize,
    pub seed: u64,
    pub drop_top: usize,
    pub use_top: usize,
    /// Trim the Z statistics (enrollment side).
    pub adaptive_z: bool,
    /// Trim the T statistics (test side).
    pub adaptive_t: bool,
    pub eps_norm: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            size: 10000,
            seed: 0,
            drop_top: 10,
            use_top: 200,
            adaptive_z: true,
            adaptive_t: true,
            eps_norm: DEFAULT_EPS_NORM,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::invalid("cohort size must be positive"));
        }
        if self.use_top == 0 {
            return Err(Error::invalid("use_top must be at least 1"));
        }
        Ok(())
    }

    /// One-line description for score file headers.
    pub fn describe(&self, method: &str) -> String {
        format!(
            "norm={method} cohort_size={} cohort_seed={} drop_top={} use_top={} adaptive_z={} adaptive_t={}",
            self.size, self.seed, self.drop_top, self.use_top, self.adaptive_z, self.adaptive_t
        )
    }

    fn trim(&self, adaptive: bool) -> (usize, usize) {
        if adaptive {
            (self.drop_top, self.use_top)
        } else {
            (0, usize::MAX)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
}

impl NormStats {
    pub fn apply(&self, s: f64) -> f64 {
        (s - self.mu) / self.sigma
    }
}

fn lookup<'a>(index: &HashMap<&UtteranceId, usize>, set: &'a EmbeddingSet, id: &UtteranceId) -> Result<&'a [f32]> {
    index
        .get(id)
        .map(|&i| set.row(i))
        .ok_or_else(|| Error::MissingId(id.to_string()))
}

/// Cosine score of every trial, both sides looked up in `emb`.
pub fn score_trials(emb: &EmbeddingSet, trials: &TrialList, eps_norm: f64) -> Result<ScoreSet> {
    score_trials_split(emb, emb, trials, eps_norm)
}

pub fn score_trials_split(
    enroll: &EmbeddingSet,
    test: &EmbeddingSet,
    trials: &TrialList,
    eps_norm: f64,
) -> Result<ScoreSet> {
    let ei = enroll.index();
    let ti = test.index();
    let scores = trials
        .pairs()
        .iter()
        .map(|(e, t)| {
            let a: Vec<f64> = lookup(&ei, enroll, e)?.iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = lookup(&ti, test, t)?.iter().map(|&v| v as f64).collect();
            embedops::cosine_score(&a, &b, eps_norm)
        })
        .collect::<Result<Vec<f64>>>()?;
    ScoreSet::new(trials.clone(), scores)
}

/// Uniform sample of `cfg.size` utterances without replacement.
pub fn cohort_select(emb: &EmbeddingSet, cfg: &CohortConfig) -> Result<EmbeddingSet> {
    cfg.validate()?;
    if cfg.size > emb.len() {
        return Err(Error::invalid(format!(
            "cohort of {} requested from {} utterances",
            cfg.size,
            emb.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picked: Vec<UtteranceId> = rand::seq::index::sample(&mut rng, emb.len(), cfg.size)
        .into_iter()
        .map(|i| emb.ids()[i].clone())
        .collect();
    emb.select(&picked)
}

/// Mean and population standard deviation of the scores left after
/// discarding the `drop_top` highest and keeping at most `use_top` of the
/// rest. The deviation is floored at [`SIGMA_FLOOR`].
pub fn adaptive_stats(scores: &[f64], drop_top: usize, use_top: usize) -> Result<NormStats> {
    if scores.len() <= drop_top {
        return Err(Error::invalid(format!(
            "{} cohort scores cannot survive dropping the top {drop_top}",
            scores.len()
        )));
    }
    if use_top == 0 {
        return Err(Error::invalid("use_top must be at least 1"));
    }
    crate::error::ensure_finite(scores, "cohort score")?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let kept = &sorted[drop_top..];
    let kept = &kept[..use_top.min(kept.len())];
    let n = kept.len() as f64;
    let rough = kept.iter().sum::<f64>() / n;
    let mu = rough + kept.iter().map(|s| s - rough).sum::<f64>() / n;
    let var = kept.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    Ok(NormStats {
        mu,
        sigma: var.sqrt().max(SIGMA_FLOOR),
    })
}

struct Side<'a> {
    ids: Vec<&'a UtteranceId>,
    rows: Vec<Vec<f64>>,
}

fn trial_side<'a>(trials: &'a TrialList, set: &EmbeddingSet, test_side: bool) -> Result<Side<'a>> {
    let index = set.index();
    let mut seen = HashMap::new();
    let mut side = Side {
        ids: Vec::new(),
        rows: Vec::new(),
    };
    for (e, t) in trials.pairs() {
        let id = if test_side { t } else { e };
        if seen.contains_key(id) {
            continue;
        }
        let row = lookup(&index, set, id)?.iter().map(|&v| v as f64).collect();
        seen.insert(id, side.ids.len());
        side.ids.push(id);
        side.rows.push(row);
    }
    Ok(side)
}

fn cohort_scores<F>(
    x: &[f64],
    id: &UtteranceId,
    cohort: &EmbeddingSet,
    rows: &[Vec<f64>],
    model_side: bool,
    score: &F,
) -> Vec<f64>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    rows.iter()
        .zip(cohort.ids())
        .filter(|(_, cid)| *cid != id)
        .map(|(c, _)| if model_side { score(x, c) } else { score(c, x) })
        .collect()
}

fn check_raw(raw: &ScoreSet) -> Result<()> {
    crate::error::ensure_finite(raw.scores(), "raw score")
}

/// ZT-norm with an arbitrary scoring function `score(model, test)`. The raw
/// trial scores must come from the same function.
pub fn zt_norm_with<F>(
    raw: &ScoreSet,
    enroll: &EmbeddingSet,
    test: &EmbeddingSet,
    cohort: &EmbeddingSet,
    cfg: &CohortConfig,
    score: F,
) -> Result<ScoreSet>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    cfg.validate()?;
    check_raw(raw)?;
    let (z_drop, z_use) = cfg.trim(cfg.adaptive_z);
    let (t_drop, t_use) = cfg.trim(cfg.adaptive_t);
    let cohort_rows = cohort.rows_f64();

    let enroll_side = trial_side(raw.trials(), enroll, false)?;
    let mut z_stats = HashMap::new();
    for (id, row) in enroll_side.ids.iter().zip(&enroll_side.rows) {
        let s = cohort_scores(row, id, cohort, &cohort_rows, true, &score);
        z_stats.insert(*id, adaptive_stats(&s, z_drop, z_use)?);
    }

    let cohort_z: Vec<NormStats> = cohort_rows
        .iter()
        .zip(cohort.ids())
        .map(|(row, id)| {
            adaptive_stats(
                &cohort_scores(row, id, cohort, &cohort_rows, true, &score),
                z_drop,
                z_use,
            )
        })
        .collect::<Result<_>>()?;

    let test_side = trial_side(raw.trials(), test, true)?;
    let mut t_stats = HashMap::new();
    for (id, row) in test_side.ids.iter().zip(&test_side.rows) {
        let normed: Vec<f64> = cohort_rows
            .iter()
            .zip(cohort.ids())
            .zip(&cohort_z)
            .filter(|((_, cid), _)| cid != id)
            .map(|((c, _), z)| z.apply(score(c, row)))
            .collect();
        t_stats.insert(*id, adaptive_stats(&normed, t_drop, t_use)?);
    }

    let out = raw
        .trials()
        .pairs()
        .iter()
        .zip(raw.scores())
        .map(|((e, t), &s)| t_stats[t].apply(z_stats[e].apply(s)))
        .collect();
    ScoreSet::new(raw.trials().clone(), out)
}

/// S-norm with an arbitrary scoring function `score(model, test)`.
pub fn s_norm_with<F>(
    raw: &ScoreSet,
    enroll: &EmbeddingSet,
    test: &EmbeddingSet,
    cohort: &EmbeddingSet,
    cfg: &CohortConfig,
    score: F,
) -> Result<ScoreSet>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    cfg.validate()?;
    check_raw(raw)?;
    let (z_drop, z_use) = cfg.trim(cfg.adaptive_z);
    let (t_drop, t_use) = cfg.trim(cfg.adaptive_t);
    let cohort_rows = cohort.rows_f64();

    let enroll_side = trial_side(raw.trials(), enroll, false)?;
    let mut e_stats = HashMap::new();
    for (id, row) in enroll_side.ids.iter().zip(&enroll_side.rows) {
        let s = cohort_scores(row, id, cohort, &cohort_rows, true, &score);
        e_stats.insert(*id, adaptive_stats(&s, z_drop, z_use)?);
    }
    let test_side = trial_side(raw.trials(), test, true)?;
    let mut t_stats = HashMap::new();
    for (id, row) in test_side.ids.iter().zip(&test_side.rows) {
        let s = cohort_scores(row, id, cohort, &cohort_rows, false, &score);
        t_stats.insert(*id, adaptive_stats(&s, t_drop, t_use)?);
    }
    let out = raw
        .trials()
        .pairs()
        .iter()
        .zip(raw.scores())
        .map(|((e, t), &s)| 0.5 * (e_stats[e].apply(s) + t_stats[t].apply(s)))
        .collect();
    ScoreSet::new(raw.trials().clone(), out)
}

fn cosine_fn(eps: f64) -> impl Fn(&[f64], &[f64]) -> f64 {
    move |a, b| embedops::cosine_unchecked(a, b, eps)
}

pub fn zt_norm(
    raw: &ScoreSet,
    enroll: &EmbeddingSet,
    test: &EmbeddingSet,
    cohort: &EmbeddingSet,
    cfg: &CohortConfig,
) -> Result<ScoreSet> {
    zt_norm_with(raw, enroll, test, cohort, cfg, cosine_fn(cfg.eps_norm))
}

pub fn s_norm(
    raw: &ScoreSet,
    enroll: &EmbeddingSet,
    test: &EmbeddingSet,
    cohort: &EmbeddingSet,
    cfg: &CohortConfig,
) -> Result<ScoreSet> {
    s_norm_with(raw, enroll, test, cohort, cfg, cosine_fn(cfg.eps_norm))
}

/// Per-trial arithmetic mean over systems scored on the same trial list.
///
/// The values of a trial are summed in sorted order as a running mean, so
/// the result does not depend on the order of `sets` and equal inputs
/// reproduce exactly.
pub fn fuse(sets: &[ScoreSet]) -> Result<ScoreSet> {
    let first = sets.first().ok_or_else(|| Error::invalid("nothing to fuse"))?;
    for s in &sets[1..] {
        if s.trials().pairs() != first.trials().pairs() {
            return Err(Error::TrialMismatch);
        }
    }
    let mut values = vec![0.0; sets.len()];
    let fused = (0..first.len())
        .map(|i| {
            for (v, s) in values.iter_mut().zip(sets) {
                *v = s.scores()[i];
            }
            values.sort_by(f64::total_cmp);
            let mut mean = 0.0;
            for (k, v) in values.iter().enumerate() {
                mean += (v - mean) / (k + 1) as f64;
            }
            mean
        })
        .collect();
    ScoreSet::new(first.trials().clone(), fused)
}
