//! Numerically stabilized vector operations: length normalization, cosine
//! scoring, statistics pooling and feature normalization.
//!
//! Inputs may be stored in single precision but every accumulation here is
//! done in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};

pub const DEFAULT_EPS_NORM: f64 = 1.0e-4;
pub const DEFAULT_EPS_POOL: f64 = 1.0e-3;
pub const DEFAULT_CMN_WINDOW: usize = 300;
/// Per-dimension standard deviations below this are replaced by 1.
pub const MVN_STD_FLOOR: f64 = 1.0e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    /// Added under the square root of the embedding norm.
    pub eps_norm: f64,
    /// Floor (or offset) under the square root of the pooled variance.
    pub eps_pool: f64,
}

impl Default for StabilityConstants {
    fn default() -> Self {
        StabilityConstants {
            eps_norm: DEFAULT_EPS_NORM,
            eps_pool: DEFAULT_EPS_POOL,
        }
    }
}

impl StabilityConstants {
    pub fn new(eps_norm: f64, eps_pool: f64) -> Result<Self> {
        if !(eps_norm > 0.0) || !(eps_pool > 0.0) {
            return Err(Error::invalid("stability constants must be positive"));
        }
        Ok(StabilityConstants { eps_norm, eps_pool })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sqrt(sum x_k^2 + eps)`.
pub fn stable_norm(x: &[f64], eps: f64) -> f64 {
    (dot(x, x) + eps).sqrt()
}

/// `x / sqrt(sum x_k^2 + eps)`. The result always has norm strictly below 1
/// and the map is not scale invariant: `x` and `2x` normalize differently.
pub fn length_normalize(x: &[f64], eps: f64) -> Result<Vec<f64>> {
    ensure_finite(x, "x")?;
    Ok(length_normalize_unchecked(x, eps))
}

pub(crate) fn length_normalize_unchecked(x: &[f64], eps: f64) -> Vec<f64> {
    let n = stable_norm(x, eps);
    x.iter().map(|v| v / n).collect()
}

/// Vector-Jacobian product of [`length_normalize`]: given `dL/dy` for
/// `y = x / n`, returns `dL/dx = g / n - x (x . g) / n^3`.
pub fn length_normalize_backward(x: &[f64], eps: f64, upstream: &[f64]) -> Vec<f64> {
    let n = stable_norm(x, eps);
    let xg = dot(x, upstream);
    let n3 = n * n * n;
    x.iter().zip(upstream).map(|(xi, gi)| gi / n - xi * xg / n3).collect()
}

/// Dot product of the two length-normalized vectors.
pub fn cosine_score(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    ensure_dim(a.len(), b.len())?;
    ensure_finite(a, "a")?;
    ensure_finite(b, "b")?;
    Ok(cosine_unchecked(a, b, eps))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let na = stable_norm(a, eps);
    let nb = stable_norm(b, eps);
    a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum()
}

/// Cosine score together with its gradient with respect to `a`.
pub fn cosine_score_grad(a: &[f64], b: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    ensure_dim(a.len(), b.len())?;
    let na = stable_norm(a, eps);
    let nb = stable_norm(b, eps);
    let ab = dot(a, b);
    let score = cosine_unchecked(a, b, eps);
    let grad = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| bi / (na * nb) - ab * ai / (na * na * na * nb))
        .collect();
    Ok((score, grad))
}

/// How the pooled standard deviation is kept away from the square-root
/// singularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolStd {
    /// `sqrt(max(var, eps))`
    #[default]
    Clamp,
    /// `sqrt(var + eps)`
    AddEps,
}

/// Mean and standard deviation over `frames` (each of equal width `F`),
/// concatenated into a vector of length `2F`.
pub fn stats_pool(frames: &[Vec<f64>], eps: f64, mode: PoolStd) -> Result<Vec<f64>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("stats pooling needs at least one frame"))?;
    let width = first.len();
    let mut sum = vec![0.0; width];
    let mut sum_sq = vec![0.0; width];
    for (t, frame) in frames.iter().enumerate() {
        ensure_dim(width, frame.len())?;
        ensure_finite(frame, &format!("frame {t}"))?;
        for (k, &v) in frame.iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let n = frames.len() as f64;
    let mut out = Vec::with_capacity(2 * width);
    out.extend(sum.iter().map(|s| s / n));
    for k in 0..width {
        let mean = sum[k] / n;
        let var = sum_sq[k] / n - mean * mean;
        let sigma = match mode {
            PoolStd::Clamp => var.max(eps).sqrt(),
            PoolStd::AddEps => (var + eps).sqrt(),
        };
        out.push(sigma);
    }
    Ok(out)
}

/// Sliding-window cepstral mean normalization.
///
/// The window is centered on each frame (`[t - w/2, t - w/2 + w)`) and, at
/// utterance edges, shifted to stay inside the utterance while keeping its
/// width `min(w, T)`. For `T <= w` this reduces to global mean subtraction.
pub fn sliding_cmn(features: &[Vec<f64>], window: usize) -> Result<Vec<Vec<f64>>> {
    if window == 0 {
        return Err(Error::invalid("CMN window must be at least one frame"));
    }
    let t_len = features.len();
    let Some(first) = features.first() else {
        return Ok(Vec::new());
    };
    let width = first.len();
    for f in features {
        ensure_dim(width, f.len())?;
    }
    let w = window.min(t_len);
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let start = t.saturating_sub(window / 2).min(t_len - w);
        let end = start + w;
        let mut mean = vec![0.0; width];
        for frame in &features[start..end] {
            for (m, v) in mean.iter_mut().zip(frame) {
                *m += v;
            }
        }
        out.push(features[t].iter().zip(&mean).map(|(v, m)| v - m / w as f64).collect());
    }
    Ok(out)
}

/// Per-dimension mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MvnStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.dim(), x.len())?;
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

pub fn compute_mvn_stats(rows: &[Vec<f64>]) -> Result<MvnStats> {
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid("cannot compute normalization stats of an empty set"))?;
    let dim = first.len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        ensure_dim(dim, r.len())?;
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for k in 0..dim {
            let d = r[k] - mean[k];
            var[k] += d * d;
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s < MVN_STD_FLOOR {
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok(MvnStats { mean, std })
}

pub fn global_mvn(rows: &[Vec<f64>], stats: &MvnStats) -> Result<Vec<Vec<f64>>> {
    rows.iter().map(|r| stats.apply(r)).collect()
}
