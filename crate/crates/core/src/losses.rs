//! Training objectives with analytic gradients: margin logits, softmax
//! cross-entropy, the bi-tempered logistic loss and the momentum-contrast
//! InfoNCE loss.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::embedops::{self, DEFAULT_EPS_NORM};
use crate::error::{ensure_dim, ensure_finite, Error, Result};

/// Cosines may exceed `[-1, 1]` by this much from rounding and are clamped.
pub const COS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient with respect to the loss input (logits or query vector).
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginVariant {
    /// `s (cos(theta) - m)` on the target class.
    Subtractive,
    /// `s cos(theta + m)` on the target class (additive angular margin).
    Angular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub scale: f64,
    pub margin: f64,
    pub variant: MarginVariant,
}

impl MarginConfig {
    pub fn subtractive(scale: f64, margin: f64) -> Self {
        MarginConfig {
            scale,
            margin,
            variant: MarginVariant::Subtractive,
        }
    }

    pub fn angular(scale: f64, margin: f64) -> Self {
        MarginConfig {
            scale,
            margin,
            variant: MarginVariant::Angular,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::invalid("margin scale must be positive"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::invalid("margin must be non-negative"));
        }
        if self.variant == MarginVariant::Angular && self.margin >= PI {
            return Err(Error::invalid("angular margin must be below pi"));
        }
        Ok(())
    }
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig::subtractive(40.0, 0.2)
    }
}

fn clamp_cos(cos_theta: f64) -> Result<f64> {
    if !cos_theta.is_finite() || cos_theta.abs() > 1.0 + COS_TOLERANCE {
        return Err(Error::invalid(format!("cosine {cos_theta} outside [-1, 1]")));
    }
    Ok(cos_theta.clamp(-1.0, 1.0))
}

pub fn margin_logits(cos_theta: f64, is_target: bool, cfg: &MarginConfig) -> Result<f64> {
    Ok(margin_logit_grad(cos_theta, is_target, cfg)?.0)
}

/// Margin logit and its derivative with respect to `cos_theta`.
///
/// For the angular variant, once `theta + m` passes `pi` the target logit
/// falls back to `s (cos(theta) - m sin(m))`, which keeps the target logit
/// below the non-target one over the whole range.
pub fn margin_logit_grad(cos_theta: f64, is_target: bool, cfg: &MarginConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let c = clamp_cos(cos_theta)?;
    let s = cfg.scale;
    if !is_target {
        return Ok((s * c, s));
    }
    let m = cfg.margin;
    match cfg.variant {
        MarginVariant::Subtractive => Ok((s * (c - m), s)),
        MarginVariant::Angular => {
            let theta = c.acos();
            if theta + m <= PI {
                let sin_theta = (1.0 - c * c).sqrt().max(1e-12);
                let z = s * (c * m.cos() - sin_theta * m.sin());
                let dz = s * (m.cos() + c * m.sin() / sin_theta);
                Ok((z, dz))
            } else {
                Ok((s * (c - m * m.sin()), s))
            }
        }
    }
}

fn check_target(logits: &[f64], target: usize) -> Result<()> {
    ensure_finite(logits, "logits")?;
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    Ok(())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `logsumexp(z) - z[target]` and its gradient `softmax(z) - onehot(target)`.
pub fn softmax_ce(logits: &[f64], target: usize) -> Result<LossGrad> {
    check_target(logits, target)?;
    let lse = log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[target] -= 1.0;
    Ok(LossGrad {
        loss: lse - logits[target],
        grad,
    })
}

/// Tempered logarithm `(x^(1-t) - 1) / (1 - t)`; `ln` at `t = 1`.
pub fn log_t(x: f64, t: f64) -> f64 {
    if t == 1.0 {
        x.ln()
    } else {
        let d = 1.0 - t;
        (d * x.ln()).exp_m1() / d
    }
}

/// Tempered exponential `[1 + (1-t) x]_+^(1/(1-t))`; `exp` at `t = 1`.
pub fn exp_t(x: f64, t: f64) -> f64 {
    if t == 1.0 {
        x.exp()
    } else {
        ln_exp_t(x, t).exp()
    }
}

/// `ln(exp_t(x))`, `-inf` outside the support.
fn ln_exp_t(x: f64, t: f64) -> f64 {
    if t == 1.0 {
        return x;
    }
    let d = 1.0 - t;
    let base = d * x;
    if base <= -1.0 {
        f64::NEG_INFINITY
    } else {
        base.ln_1p() / d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiTemperedConfig {
    /// Temperature of the log in the loss, `0 < t1 <= 1`.
    pub t1: f64,
    /// Temperature of the exp in the softmax, `t2 >= 1`.
    pub t2: f64,
    pub lambda_iters: usize,
    pub lambda_tol: f64,
}

impl Default for BiTemperedConfig {
    fn default() -> Self {
        BiTemperedConfig {
            t1: 0.9,
            t2: 1.1,
            lambda_iters: 200,
            lambda_tol: 1e-12,
        }
    }
}

impl BiTemperedConfig {
    pub fn new(t1: f64, t2: f64) -> Self {
        BiTemperedConfig {
            t1,
            t2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > 0.0 && self.t1 <= 1.0 && self.t2 >= 1.0 && self.t2.is_finite()) {
            return Err(Error::invalid(format!(
                "bi-tempered temperatures need 0 < t1 <= 1 <= t2, got t1={} t2={}",
                self.t1, self.t2
            )));
        }
        if self.lambda_iters == 0 || !(self.lambda_tol > 0.0) {
            return Err(Error::invalid("lambda search needs positive iterations and tolerance"));
        }
        Ok(())
    }
}

/// Tempered softmax: per-class log-probabilities `ln exp_t(z_k - lambda)`
/// with `lambda` chosen so the probabilities sum to one, plus `lambda`.
///
/// For `t = 1` this is the ordinary softmax. Otherwise `lambda` is found by
/// bisection. The sum is decreasing in `lambda` and is at least 1 at
/// `max(z)`, so the bracket starts at `[max(z) - 1, max(z)]` and its upper
/// end is pushed up until the sum drops to 1 or below.
pub fn tempered_log_softmax(logits: &[f64], t: f64, iters: usize, tol: f64) -> Result<(Vec<f64>, f64)> {
    ensure_finite(logits, "logits")?;
    if logits.is_empty() {
        return Err(Error::invalid("tempered softmax of an empty vector"));
    }
    if t < 1.0 {
        return Err(Error::invalid("tempered softmax requires t >= 1"));
    }
    if t == 1.0 {
        let lse = log_sum_exp(logits);
        return Ok((logits.iter().map(|z| z - lse).collect(), lse));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mass = |lambda: f64| -> f64 { logits.iter().map(|&z| exp_t(z - lambda, t)).sum() };

    let mut lo = max - 1.0;
    let mut width = 1.0;
    let mut hi = max;
    while mass(hi) > 1.0 {
        lo = hi;
        width *= 2.0;
        hi = max + width;
        if !hi.is_finite() {
            return Err(Error::NonConvergence {
                residual: mass(lo) - 1.0,
            });
        }
    }
    let mut lambda = hi;
    let mut residual = mass(hi) - 1.0;
    for _ in 0..iters {
        if residual.abs() <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let r = mass(mid) - 1.0;
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        lambda = mid;
        residual = r;
    }
    if residual.abs() > tol {
        return Err(Error::NonConvergence { residual });
    }
    Ok((logits.iter().map(|&z| ln_exp_t(z - lambda, t)).collect(), lambda))
}

pub fn tempered_softmax(logits: &[f64], t: f64, iters: usize, tol: f64) -> Result<Vec<f64>> {
    Ok(tempered_log_softmax(logits, t, iters, tol)?
        .0
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Bi-tempered logistic loss with a one-hot target:
///
/// `L = -log_t1(p_y) - 1/(2-t1) + 1/(2-t1) * sum_k p_k^(2-t1)`
///
/// where `p` is the tempered softmax at temperature `t2`. At
/// `t1 = t2 = 1` this is exactly the softmax cross-entropy.
///
/// Gradient: with `g_k = p_k^(1-t1) - [k=y] p_y^(-t1)` (the derivative in
/// `p`) and `q_k = p_k^t2` (the tempered-softmax Jacobian weights),
/// `dL/dz_j = g_j q_j - q_j / sum(q) * sum_k g_k q_k`.
pub fn bitempered_loss(logits: &[f64], target: usize, cfg: &BiTemperedConfig) -> Result<LossGrad> {
    cfg.validate()?;
    check_target(logits, target)?;
    let (t1, t2) = (cfg.t1, cfg.t2);
    let (log_p, _) = tempered_log_softmax(logits, t2, cfg.lambda_iters, cfg.lambda_tol)?;
    let log_py = log_p[target];

    let neg_log_t1_py = if t1 == 1.0 {
        -log_py
    } else {
        -((1.0 - t1) * log_py).exp_m1() / (1.0 - t1)
    };
    let a = 2.0 - t1;
    let sum_pow: f64 = log_p.iter().map(|lp| (a * lp).exp()).sum();
    let loss = neg_log_t1_py + (sum_pow - 1.0) / a;

    // g_k q_k and q_k, each formed in the log domain to avoid 0 * inf
    let q: Vec<f64> = log_p.iter().map(|lp| (t2 * lp).exp()).collect();
    let gq: Vec<f64> = log_p
        .iter()
        .enumerate()
        .map(|(k, lp)| {
            let mut v = ((1.0 - t1 + t2) * lp).exp();
            if k == target {
                v -= ((t2 - t1) * lp).exp();
            }
            v
        })
        .collect();
    let q_sum: f64 = q.iter().sum();
    let gq_sum: f64 = gq.iter().sum();
    let grad = gq.iter().zip(&q).map(|(gqj, qj)| gqj - qj / q_sum * gq_sum).collect();
    Ok(LossGrad { loss, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub scale: f64,
    pub queue_capacity: usize,
    pub eps_norm: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            scale: 10.0,
            queue_capacity: 65536,
            eps_norm: DEFAULT_EPS_NORM,
        }
    }
}

/// InfoNCE over cosine logits `s [cos(q, k+), cos(q, n_1), ...]` with the
/// positive at index 0. Returns the gradient with respect to `query`.
pub fn moco_infonce<'a>(
    query: &[f64],
    positive_key: &[f64],
    queue: impl IntoIterator<Item = &'a [f64]>,
    cfg: &ContrastiveConfig,
) -> Result<LossGrad> {
    if !(cfg.scale > 0.0) {
        return Err(Error::invalid("contrastive scale must be positive"));
    }
    ensure_dim(query.len(), positive_key.len())?;
    let mut cos_grads = vec![embedops::cosine_score_grad(query, positive_key, cfg.eps_norm)?];
    for negative in queue {
        ensure_dim(query.len(), negative.len())?;
        cos_grads.push(embedops::cosine_score_grad(query, negative, cfg.eps_norm)?);
    }
    let logits: Vec<f64> = cos_grads.iter().map(|(c, _)| cfg.scale * c).collect();
    let ce = softmax_ce(&logits, 0)?;
    let mut grad = vec![0.0; query.len()];
    for (dl, (_, dc)) in ce.grad.iter().zip(&cos_grads) {
        for (g, d) in grad.iter_mut().zip(dc) {
            *g += dl * cfg.scale * d;
        }
    }
    Ok(LossGrad { loss: ce.loss, grad })
}

/// Loss applied to the margin logits of the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Softmax,
    BiTempered(BiTemperedConfig),
}

impl Objective {
    pub fn evaluate(&self, logits: &[f64], target: usize) -> Result<LossGrad> {
        match self {
            Objective::Softmax => softmax_ce(logits, target),
            Objective::BiTempered(cfg) => bitempered_loss(logits, target, cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierLossGrad {
    pub loss: f64,
    pub d_embedding: Vec<f64>,
    pub d_representatives: Vec<Vec<f64>>,
}

/// Full classification-head loss for one example: cosines between the
/// embedding and every class representative (both length-normalized with
/// `eps_norm`), margin logits, then `objective`.
pub fn margin_classifier_loss(
    embedding: &[f64],
    representatives: &[Vec<f64>],
    target: usize,
    margin: &MarginConfig,
    objective: &Objective,
    eps_norm: f64,
) -> Result<ClassifierLossGrad> {
    if target >= representatives.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: representatives.len(),
        });
    }
    let mut logits = Vec::with_capacity(representatives.len());
    let mut dz_dc = Vec::with_capacity(representatives.len());
    let mut cos_grad_e = Vec::with_capacity(representatives.len());
    let mut cos_grad_r = Vec::with_capacity(representatives.len());
    for (k, rep) in representatives.iter().enumerate() {
        let (c, ge) = embedops::cosine_score_grad(embedding, rep, eps_norm)?;
        let (_, gr) = embedops::cosine_score_grad(rep, embedding, eps_norm)?;
        let (z, dz) = margin_logit_grad(c, k == target, margin)?;
        logits.push(z);
        dz_dc.push(dz);
        cos_grad_e.push(ge);
        cos_grad_r.push(gr);
    }
    let out = objective.evaluate(&logits, target)?;
    let mut d_embedding = vec![0.0; embedding.len()];
    let mut d_representatives = Vec::with_capacity(representatives.len());
    for k in 0..representatives.len() {
        let dc = out.grad[k] * dz_dc[k];
        for (d, g) in d_embedding.iter_mut().zip(&cos_grad_e[k]) {
            *d += dc * g;
        }
        d_representatives.push(cos_grad_r[k].iter().map(|g| dc * g).collect());
    }
    Ok(ClassifierLossGrad {
        loss: out.loss,
        d_embedding,
        d_representatives,
    })
}

/// Batch reduction: `sum_i w_i L_i / n`, left to right. Without weights this
/// is the plain mean; an example with weight 0 contributes nothing.
pub fn weighted_mean(losses: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if losses.is_empty() {
        return Ok(0.0);
    }
    let total = match weights {
        Some(w) => {
            ensure_dim(losses.len(), w.len())?;
            losses.iter().zip(w).fold(0.0, |acc, (l, w)| acc + l * w)
        }
        None => losses.iter().fold(0.0, |acc, l| acc + l),
    };
    Ok(total / losses.len() as f64)
}
