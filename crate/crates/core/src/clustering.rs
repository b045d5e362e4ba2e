//! Pseudo-label generation.
//!
//! Embeddings are length-normalized, partitioned by k-means into
//! `kmeans_k` clusters, and the k-means centroids are then merged
//! agglomeratively (size-weighted centroid linkage on cosine similarity)
//! down to `n_pseudo` pseudo-speakers.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedops::{self, DEFAULT_EPS_NORM};
use crate::error::{Error, Result};
use crate::types::{EmbeddingSet, LabelSet, UtteranceId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub n_pseudo: usize,
    /// k-means cluster count before agglomerative merging.
    pub kmeans_k: usize,
    pub max_lloyd_iters: usize,
    pub seed: u64,
    pub restarts: usize,
    pub eps_norm: f64,
}

impl ClusteringConfig {
    /// `kmeans_k = 3 * n_pseudo`.
    pub fn new(n_pseudo: usize, seed: u64) -> Self {
        ClusteringConfig {
            n_pseudo,
            kmeans_k: 3 * n_pseudo,
            max_lloyd_iters: 100,
            seed,
            restarts: 1,
            eps_norm: DEFAULT_EPS_NORM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pseudo == 0 || self.kmeans_k < self.n_pseudo {
            return Err(Error::invalid(format!(
                "need kmeans_k >= n_pseudo >= 1, got kmeans_k={} n_pseudo={}",
                self.kmeans_k, self.n_pseudo
            )));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("k-means needs at least one restart"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index drawn with probability proportional to `weights` using a single
/// uniform draw and a cumulative scan.
fn sample_weighted(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return ((u * weights.len() as f64) as usize).min(weights.len() - 1);
    }
    let target = u * total;
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cum += w;
            last_positive = i;
            if cum > target {
                return i;
            }
        }
    }
    last_positive
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    let first = sample_weighted(&vec![1.0; points.len()], rng.random::<f64>());
    centroids.push(points[first].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = sample_weighted(&d2, rng.random::<f64>());
        let c = points[next].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignment = points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            inertia += best_d;
            best
        })
        .collect();
    (assignment, inertia)
}

/// Means of the assigned points; empty clusters are re-seeded to the point
/// farthest from its current centroid.
fn update(points: &[Vec<f64>], assignment: &[usize], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = old.len();
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut dist: Vec<f64> = points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &old[a]))
        .collect();
    for j in 0..k {
        if counts[j] > 0 {
            sums[j].iter_mut().for_each(|s| *s /= counts[j] as f64);
        } else {
            let mut far = 0;
            for (i, &d) in dist.iter().enumerate() {
                if d > dist[far] {
                    far = i;
                }
            }
            sums[j] = points[far].clone();
            dist[far] = 0.0;
        }
    }
    sums
}

fn lloyd(points: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> ClusterModel {
    let mut centroids = kmeans_pp_init(points, k, rng);
    let (mut assignment, mut inertia) = assign(points, &centroids);
    let mut trace = vec![inertia];
    for _ in 0..max_iters {
        let next_centroids = update(points, &assignment, &centroids);
        let (next_assignment, next_inertia) = assign(points, &next_centroids);
        debug_assert!(next_inertia <= inertia * (1.0 + 1e-12) + 1e-12);
        centroids = next_centroids;
        inertia = next_inertia;
        trace.push(inertia);
        if next_assignment == assignment {
            break;
        }
        assignment = next_assignment;
    }
    ClusterModel {
        centroids,
        assignment,
        inertia,
        inertia_trace: trace,
    }
}

/// k-means++ seeding followed by Lloyd iterations, best of `restarts`.
pub fn kmeans_rows(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!("k-means with k={k} on {} points", points.len())));
    }
    let dim = points[0].len();
    for p in points {
        crate::error::ensure_dim(dim, p.len())?;
        crate::error::ensure_finite(p, "point")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ClusterModel> = None;
    for _ in 0..restarts.max(1) {
        let m = lloyd(points, k, max_iters, &mut rng);
        if best.as_ref().is_none_or(|b| m.inertia < b.inertia) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn kmeans(x: &EmbeddingSet, k: usize, cfg: &ClusteringConfig) -> Result<ClusterModel> {
    kmeans_rows(&x.rows_f64(), k, cfg.max_lloyd_iters, cfg.restarts, cfg.seed)
}

/// Plain cosine similarity; 0 when either vector is zero.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = (embedops::dot(a, a) * embedops::dot(b, b)).sqrt();
    if d > 0.0 {
        embedops::dot(a, b) / d
    } else {
        0.0
    }
}

/// Greedy agglomeration of the model's centroids down to `target_k`
/// clusters. At every step the pair with the highest cosine similarity
/// merges (ties go to the lowest index pair) into the size-weighted mean
/// of the two centroids. Returns the map from k-means cluster to merged
/// cluster; merged clusters are numbered by their smallest member.
pub fn ahc_merge(model: &ClusterModel, target_k: usize) -> Result<Vec<usize>> {
    if target_k < 1 {
        return Err(Error::invalid("AHC target must be at least 1"));
    }
    let k = model.k();
    if target_k > k {
        return Err(Error::invalid(format!("AHC target {target_k} exceeds {k} clusters")));
    }
    let sizes = model.sizes();
    // (centroid, size, members); members[0] is the smallest original index
    let mut clusters: Vec<(Vec<f64>, f64, Vec<usize>)> = model
        .centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), sizes[i] as f64, vec![i]))
        .collect();
    let mut sim: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| cosine(&clusters[i].0, &clusters[j].0)).collect())
        .collect();
    while clusters.len() > target_k {
        let n = clusters.len();
        let (mut bi, mut bj, mut best) = (0, 1, f64::NEG_INFINITY);
        for (i, row) in sim.iter().enumerate().take(n) {
            for (j, &s) in row.iter().enumerate().take(n).skip(i + 1) {
                if s > best {
                    best = s;
                    bi = i;
                    bj = j;
                }
            }
        }
        let (cj, sj, mj) = clusters.remove(bj);
        let (ci, si, mi) = &mut clusters[bi];
        let total = *si + sj;
        if total > 0.0 {
            for (a, b) in ci.iter_mut().zip(&cj) {
                *a = (*a * *si + b * sj) / total;
            }
        } else {
            for (a, b) in ci.iter_mut().zip(&cj) {
                *a = 0.5 * (*a + b);
            }
        }
        *si = total;
        mi.extend(mj);
        mi.sort_unstable();
        sim.remove(bj);
        for row in sim.iter_mut() {
            row.remove(bj);
        }
        for j in 0..clusters.len() {
            let s = cosine(&clusters[bi].0, &clusters[j].0);
            sim[bi][j] = s;
            sim[j][bi] = s;
        }
    }
    let mut mapping = vec![0; k];
    for (label, (_, _, members)) in clusters.iter().enumerate() {
        for &m in members {
            mapping[m] = label;
        }
    }
    Ok(mapping)
}

/// Relabel so labels appear as 0, 1, 2, ... in order of first occurrence.
pub fn relabel_dense(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

pub fn generate_pseudo_labels(x: &EmbeddingSet, cfg: &ClusteringConfig) -> Result<LabelSet> {
    cfg.validate()?;
    if x.len() < cfg.n_pseudo {
        return Err(Error::invalid(format!(
            "{} utterances cannot form {} pseudo-speakers",
            x.len(),
            cfg.n_pseudo
        )));
    }
    let rows: Vec<Vec<f64>> = (0..x.len())
        .map(|i| embedops::length_normalize(&x.row_f64(i), cfg.eps_norm))
        .collect::<Result<_>>()?;
    let k = cfg.kmeans_k.min(x.len());
    let model = kmeans_rows(&rows, k, cfg.max_lloyd_iters, cfg.restarts, cfg.seed)?;
    let mapping = ahc_merge(&model, cfg.n_pseudo)?;
    let merged: Vec<usize> = model.assignment.iter().map(|&a| mapping[a]).collect();
    LabelSet::new(x.ids().to_vec(), relabel_dense(&merged), cfg.n_pseudo, None)
}

fn check_same_ids(a: &[UtteranceId], b: &[UtteranceId]) -> Result<HashMap<UtteranceId, usize>> {
    let index: HashMap<UtteranceId, usize> = b.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
    if a.len() != b.len() {
        return Err(Error::IdMismatch(format!("{} vs {} utterances", a.len(), b.len())));
    }
    if let Some(missing) = a.iter().find(|id| !index.contains_key(*id)) {
        return Err(Error::IdMismatch(format!("`{missing}` missing from second set")));
    }
    Ok(index)
}

/// Row-wise concatenation of the two length-normalized embeddings, in the
/// id order of `a`.
pub fn concat_embeddings(a: &EmbeddingSet, b: &EmbeddingSet, eps_norm: f64) -> Result<EmbeddingSet> {
    let index = check_same_ids(a.ids(), b.ids())?;
    let dim = a.dim() + b.dim();
    let mut rows = Vec::with_capacity(a.len());
    for (i, id) in a.ids().iter().enumerate() {
        let mut row = embedops::length_normalize(&a.row_f64(i), eps_norm)?;
        row.extend(embedops::length_normalize(&b.row_f64(index[id]), eps_norm)?);
        rows.push(row);
    }
    EmbeddingSet::from_rows(a.ids().to_vec(), dim, &rows)
}

/// Per-utterance weights from the agreement of two clusterings.
///
/// Clusters are matched one-to-one greedily by descending overlap count;
/// equal counts are ordered by the first utterance carrying the pair, which
/// keeps the result independent of how either side numbers its clusters.
/// An utterance whose `(a, b)` pair is a matched pair gets weight 1, any
/// other gets `downweight`. Weights follow the id order of `labels_a`.
pub fn cluster_agreement_weights(labels_a: &LabelSet, labels_b: &LabelSet, downweight: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&downweight) {
        return Err(Error::invalid("downweight must be in [0, 1]"));
    }
    let index = check_same_ids(labels_a.ids(), labels_b.ids())?;
    let pairs: Vec<(usize, usize)> = labels_a
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (labels_a.labels()[i], labels_b.labels()[index[id]]))
        .collect();
    // pair -> (count, first utterance)
    let mut table: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        table.entry(*p).or_insert((0, i)).0 += 1;
    }
    let mut cells: Vec<((usize, usize), (usize, usize))> = table.into_iter().collect();
    cells.sort_by(|x, y| y.1 .0.cmp(&x.1 .0).then(x.1 .1.cmp(&y.1 .1)));
    let mut used_a = HashMap::new();
    let mut used_b = HashMap::new();
    for ((a, b), _) in cells {
        if !used_a.contains_key(&a) && !used_b.contains_key(&b) {
            used_a.insert(a, b);
            used_b.insert(b, a);
        }
    }
    Ok(pairs
        .iter()
        .map(|(a, b)| if used_a.get(a) == Some(b) { 1.0 } else { downweight })
        .collect())
}

/// Label exchange between two networks: the labels that will train network
/// B come from A's embeddings and vice versa. With `concat`, both label sets
/// come from the concatenated embeddings, clustered with two different
/// seeds. Returns `(labels_for_b, labels_for_a)`, both in A's id order.
pub fn cross_label_exchange(
    emb_a: &EmbeddingSet,
    emb_b: &EmbeddingSet,
    cfg: &ClusteringConfig,
    concat: bool,
) -> Result<(LabelSet, LabelSet)> {
    check_same_ids(emb_a.ids(), emb_b.ids())?;
    if concat {
        let joint = concat_embeddings(emb_a, emb_b, cfg.eps_norm)?;
        let for_b = generate_pseudo_labels(&joint, cfg)?;
        let second = ClusteringConfig {
            seed: cfg.seed.wrapping_add(1),
            ..*cfg
        };
        let for_a = generate_pseudo_labels(&joint, &second)?;
        Ok((for_b, for_a))
    } else {
        let for_b = generate_pseudo_labels(emb_a, cfg)?;
        let for_a = generate_pseudo_labels(emb_b, cfg)?.aligned_to(emb_a.ids())?;
        Ok((for_b, for_a))
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    crate::error::ensure_dim(a.len(), b.len())?;
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| c2(v)).sum();
    let total = c2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ids;
    use proptest::prelude::*;
    use rand::Rng;

    fn line(points: &[f64]) -> Vec<Vec<f64>> {
        points.iter().map(|&p| vec![p]).collect()
    }

    fn set(rows: &[Vec<f64>]) -> EmbeddingSet {
        let names: Vec<String> = (0..rows.len()).map(|i| format!("u{i}")).collect();
        EmbeddingSet::from_rows(ids(&names).unwrap(), rows[0].len(), rows).unwrap()
    }

    #[test]
    fn n_equals_k_is_zero_inertia() {
        let pts = line(&[0.0, 1.0, 5.0, 9.0]);
        let m = kmeans_rows(&pts, 4, 50, 1, 3).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut a = m.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
        assert!(kmeans_rows(&pts, 5, 50, 1, 3).is_err());
    }

    #[test]
    fn one_dimensional_two_clusters() {
        let pts = line(&[0.0, 0.1, 10.0, 10.1]);
        let m = kmeans_rows(&pts, 2, 50, 3, 1).unwrap();
        assert_eq!(m.assignment[0], m.assignment[1]);
        assert_eq!(m.assignment[2], m.assignment[3]);
        assert_ne!(m.assignment[0], m.assignment[2]);
        // brute force over all 2-partitions
        let mut best = f64::INFINITY;
        for mask in 1u32..15 {
            let cost = |bit: u32| {
                let g: Vec<f64> = (0..4).filter(|i| (mask >> i) & 1 == bit).map(|i| pts[i][0]).collect();
                let mean = g.iter().sum::<f64>() / g.len() as f64;
                g.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            };
            best = best.min(cost(0) + cost(1));
        }
        assert!((m.inertia - best).abs() < 1e-12);
    }

    #[test]
    fn duplicated_dataset_gives_same_centroids() {
        let pts: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0],
            vec![0.2, 0.1],
            vec![5.0, 5.0],
            vec![5.1, 4.8],
            vec![-4.0, 6.0],
            vec![-4.2, 6.1],
        ];
        let doubled: Vec<Vec<f64>> = pts.iter().flat_map(|p| [p.clone(), p.clone()]).collect();
        let a = kmeans_rows(&pts, 3, 50, 1, 17).unwrap();
        let b = kmeans_rows(&doubled, 3, 50, 1, 17).unwrap();
        for (ca, cb) in a.centroids.iter().zip(&b.centroids) {
            for (x, y) in ca.iter().zip(cb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // centroid 1 starts far from everything and loses all points
        let pts = line(&[0.0, 0.1, 0.2, 10.0]);
        let old = vec![vec![0.1], vec![100.0]];
        let (a, _) = assign(&pts, &old);
        assert_eq!(a, vec![0, 0, 0, 0]);
        let c = update(&pts, &a, &old);
        assert_eq!(c[1], vec![10.0]);
    }

    #[test]
    fn inertia_never_increases_and_is_recomputable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let m = kmeans_rows(&pts, 7, 100, 1, 2).unwrap();
        for w in m.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let recomputed: f64 = pts
            .iter()
            .zip(&m.assignment)
            .map(|(p, &a)| sq_dist(p, &m.centroids[a]))
            .sum();
        assert!((recomputed - m.inertia).abs() < 1e-9);
    }

    fn model_from(centroids: Vec<Vec<f64>>) -> ClusterModel {
        let k = centroids.len();
        ClusterModel {
            centroids,
            assignment: (0..k).collect(),
            inertia: 0.0,
            inertia_trace: vec![0.0],
        }
    }

    #[test]
    fn ahc_identity_and_identical_pair() {
        let m = model_from(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.2]]);
        assert_eq!(ahc_merge(&m, 3).unwrap(), vec![0, 1, 2]);
        let m = model_from(vec![vec![1.0, 0.0], vec![0.3, 1.0], vec![1.0, 0.0]]);
        let map = ahc_merge(&m, 2).unwrap();
        assert_eq!(map[0], map[2]);
        assert_ne!(map[0], map[1]);
        assert!(ahc_merge(&m, 0).is_err());
        assert!(ahc_merge(&m, 4).is_err());
    }

    /// Enumerates every merge sequence and keeps the one whose every step
    /// merges a maximum-similarity pair.
    fn greedy_by_enumeration(clusters: Vec<(Vec<f64>, f64, Vec<usize>)>, target: usize) -> Option<Vec<Vec<usize>>> {
        if clusters.len() == target {
            let mut groups: Vec<Vec<usize>> = clusters.into_iter().map(|c| c.2).collect();
            groups.iter_mut().for_each(|g| g.sort_unstable());
            groups.sort();
            return Some(groups);
        }
        let sims: Vec<(usize, usize, f64)> = (0..clusters.len())
            .flat_map(|i| (i + 1..clusters.len()).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, cosine(&clusters[i].0, &clusters[j].0)))
            .collect();
        let top = sims.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
        for (i, j, s) in sims {
            if s < top {
                continue;
            }
            let mut next = clusters.clone();
            let (cj, nj, mj) = next.remove(j);
            let (ci, ni, mi) = &mut next[i];
            for (a, b) in ci.iter_mut().zip(&cj) {
                *a = (*a * *ni + b * nj) / (*ni + nj);
            }
            *ni += nj;
            mi.extend(mj);
            return greedy_by_enumeration(next, target);
        }
        None
    }

    #[test]
    fn ahc_matches_enumeration_oracle_on_a_line() {
        // four centroids along the line y = 1 - x/4 (not through the origin)
        let cents: Vec<Vec<f64>> = [0.0, 0.5, 2.5, 4.0]
            .iter()
            .map(|&x| vec![x, 1.0 - x / 4.0 + 0.1])
            .collect();
        let m = model_from(cents.clone());
        let map = ahc_merge(&m, 2).unwrap();
        let mut groups: Vec<Vec<usize>> = vec![vec![]; 2];
        for (i, &g) in map.iter().enumerate() {
            groups[g].push(i);
        }
        groups.sort();
        let oracle = greedy_by_enumeration(
            cents.into_iter().enumerate().map(|(i, c)| (c, 1.0, vec![i])).collect(),
            2,
        )
        .unwrap();
        assert_eq!(groups, oracle);
    }

    #[test]
    fn pseudo_labels_recover_separated_speakers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let centers: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..120 {
            let s = i % 6;
            rows.push(centers[s].iter().map(|c| c + rng.random_range(-0.02..0.02)).collect());
            truth.push(s);
        }
        let x = set(&rows);
        let labels = generate_pseudo_labels(&x, &ClusteringConfig::new(6, 5)).unwrap();
        assert_eq!(labels.n_clusters(), 6);
        assert!(adjusted_rand_index(labels.labels(), &truth).unwrap() > 0.99);

        let one = generate_pseudo_labels(&x, &ClusteringConfig::new(1, 5)).unwrap();
        assert!(one.labels().iter().all(|&l| l == 0));
        let other_seed = generate_pseudo_labels(&x, &ClusteringConfig::new(6, 6)).unwrap();
        assert_eq!(other_seed.len(), 120);
        assert!(generate_pseudo_labels(&set(&rows[..3]), &ClusteringConfig::new(6, 5)).is_err());
    }

    #[test]
    fn concat_shapes_and_rankings() {
        let a = set(&[vec![1.0, 0.0], vec![0.6, 0.8], vec![-0.2, 1.0], vec![0.9, 0.1]]);
        let b = set(&[
            vec![1.0, 0.0, 2.0],
            vec![0.0, 1.0, 0.0],
            vec![3.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ]);
        assert_eq!(concat_embeddings(&a, &b, 1e-4).unwrap().dim(), 5);

        let aa = concat_embeddings(&a, &a, 1e-4).unwrap();
        let score =
            |s: &EmbeddingSet, i: usize, j: usize| embedops::cosine_score(&s.row_f64(i), &s.row_f64(j), 1e-4).unwrap();
        let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let mut order_a: Vec<usize> = (0..6).collect();
        order_a.sort_by(|&p, &q| score(&a, pairs[p].0, pairs[p].1).total_cmp(&score(&a, pairs[q].0, pairs[q].1)));
        let mut order_aa: Vec<usize> = (0..6).collect();
        order_aa.sort_by(|&p, &q| score(&aa, pairs[p].0, pairs[p].1).total_cmp(&score(&aa, pairs[q].0, pairs[q].1)));
        assert_eq!(order_a, order_aa);

        let zeros = set(&vec![vec![0.0; 3]; 4]);
        let az = concat_embeddings(&a, &zeros, 1e-4).unwrap();
        for &(i, j) in &pairs {
            let la = embedops::length_normalize(&a.row_f64(i), 1e-4).unwrap();
            let lb = embedops::length_normalize(&a.row_f64(j), 1e-4).unwrap();
            let direct = embedops::dot(&la, &lb);
            assert!((embedops::dot(&az.row_f64(i), &az.row_f64(j)) - direct).abs() < 1e-6);
        }

        let renamed = EmbeddingSet::from_rows(ids(&["x", "u1", "u2", "u3"]).unwrap(), 2, &a.rows_f64()).unwrap();
        assert!(matches!(
            concat_embeddings(&a, &renamed, 1e-4),
            Err(Error::IdMismatch(_))
        ));
    }

    fn labels(v: &[usize]) -> LabelSet {
        let names: Vec<String> = (0..v.len()).map(|i| format!("u{i}")).collect();
        LabelSet::from_labels(ids(&names).unwrap(), v.to_vec()).unwrap()
    }

    #[test]
    fn agreement_examples() {
        let a = labels(&[0, 0, 1, 1, 2, 2]);
        let b = labels(&[2, 2, 0, 0, 1, 1]);
        assert_eq!(cluster_agreement_weights(&a, &b, 0.5).unwrap(), vec![1.0; 6]);

        let a = labels(&[0, 0, 0, 1, 1]);
        let b = labels(&[0, 0, 0, 0, 0]);
        let w = cluster_agreement_weights(&a, &b, 0.5).unwrap();
        assert_eq!(w, vec![1.0, 1.0, 1.0, 0.5, 0.5]);
        assert_eq!(cluster_agreement_weights(&a, &b, 1.0).unwrap(), vec![1.0; 5]);
        assert!(cluster_agreement_weights(&a, &labels(&[0; 4]), 0.5).is_err());
    }

    #[test]
    fn exchange_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let base = if i % 3 == 0 {
                    [1.0, 0.0, 0.0]
                } else if i % 3 == 1 {
                    [0.0, 1.0, 0.0]
                } else {
                    [0.0, 0.0, 1.0]
                };
                base.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect()
            })
            .collect();
        let truth: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let a = set(&rows);
        let cfg = ClusteringConfig::new(3, 9);
        let (for_b, for_a) = cross_label_exchange(&a, &a, &cfg, false).unwrap();
        assert_eq!(for_b, for_a);
        let (for_b, for_a) = cross_label_exchange(&a, &a, &cfg, true).unwrap();
        assert!(adjusted_rand_index(for_b.labels(), &truth).unwrap() > 0.95);
        assert!(adjusted_rand_index(for_a.labels(), &truth).unwrap() > 0.95);
    }

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        // sklearn: adjusted_rand_score([0,0,1,1],[0,0,1,2]) == 0.5714285714285715
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert!((v - 0.5714285714285715).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn agreement_is_relabel_invariant(
            a in prop::collection::vec(0usize..4, 1..40),
            seed in 0u64..1000,
            perm_seed in 0u64..1000,
        ) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<usize> = a.iter().map(|&x| if r.random::<f64>() < 0.7 { x } else { r.random_range(0..4) }).collect();
            let mut pa: Vec<usize> = (0..4).collect();
            let mut pb: Vec<usize> = (0..4).collect();
            use rand::seq::SliceRandom;
            let mut pr = ChaCha8Rng::seed_from_u64(perm_seed);
            pa.shuffle(&mut pr);
            pb.shuffle(&mut pr);
            let a2: Vec<usize> = a.iter().map(|&x| pa[x]).collect();
            let b2: Vec<usize> = b.iter().map(|&x| pb[x]).collect();
            let w1 = cluster_agreement_weights(&labels(&a), &labels(&b), 0.3).unwrap();
            let w2 = cluster_agreement_weights(&labels(&a2), &labels(&b2), 0.3).unwrap();
            prop_assert_eq!(w1, w2);
        }

        #[test]
        fn pseudo_labels_survive_rotation(seed in 0u64..200, rot_seed in 0u64..200) {
            let (d, n_spk, per) = (6usize, 5usize, 8usize);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = Vec::new();
            for _ in 0..n_spk {
                let c: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
                for _ in 0..per {
                    rows.push(c.iter().map(|v| v + r.random_range(-0.05..0.05)).collect::<Vec<f64>>());
                }
            }
            // Gram-Schmidt on a random square matrix gives an orthogonal basis.
            let mut r = ChaCha8Rng::seed_from_u64(rot_seed);
            let mut q: Vec<Vec<f64>> = Vec::new();
            while q.len() < d {
                let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
                for b in &q {
                    let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-3 {
                    q.push(v.into_iter().map(|x| x / n).collect());
                }
            }
            let rotated: Vec<Vec<f64>> = rows.iter().map(|x| q.iter().map(|b| b.iter().zip(x).map(|(u, v)| u * v).sum()).collect()).collect();
            let names: Vec<String> = (0..rows.len()).map(|i| format!("u{i}")).collect();
            let set = |rs: &[Vec<f64>]| EmbeddingSet::from_rows(crate::types::ids(&names).unwrap(), d, rs).unwrap();
            let cfg = ClusteringConfig::new(n_spk, 3);
            let a = generate_pseudo_labels(&set(&rows), &cfg).unwrap();
            let b = generate_pseudo_labels(&set(&rotated), &cfg).unwrap();
            prop_assert!(adjusted_rand_index(a.labels(), b.labels()).unwrap() > 0.95);
        }

        #[test]
        fn ahc_hits_target_exactly(n in 2usize..12, target in 1usize..12, seed in 0u64..500) {
            prop_assume!(target <= n);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let cents: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
            let map = ahc_merge(&model_from(cents), target).unwrap();
            let mut used: Vec<usize> = map.clone();
            used.sort_unstable();
            used.dedup();
            prop_assert_eq!(used, (0..target).collect::<Vec<_>>());
        }
    }
}
