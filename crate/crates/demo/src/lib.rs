//! Browser demo: the learning-rate schedule, tempered softmax with the
//! bi-tempered loss, and raw vs ZT-normalized DET curves on synthetic data.
//!
//! Every export has a plain Rust twin returning `Result<_, String>` so the
//! logic is testable off the browser.

use selfsv::embedops;
use selfsv::losses::{self, BiTemperedConfig};
use selfsv::metrics::{self, DcfParams, DetPoint};
use selfsv::scoring::{self, CohortConfig};
use selfsv::synth::{self, SynthConfig};
use selfsv::trainer::{self, LrSchedule};
use selfsv::EmbeddingSet;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// DET curves are thinned to at most this many points before plotting.
const MAX_DET_POINTS: usize = 400;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn lr_curve_values(
    nominal: f64,
    warmup_frac: f64,
    constant_frac: f64,
    n_decay_steps: usize,
    decay_factor: f64,
    n_points: usize,
) -> Result<Vec<f64>, String> {
    if n_points < 2 {
        return Err("need at least two points".into());
    }
    let sched = LrSchedule {
        warmup_frac,
        constant_frac,
        n_decay_steps,
        decay_factor,
        ..LrSchedule::default()
    };
    (0..n_points)
        .map(|i| trainer::lr_at(i as f64 / (n_points - 1) as f64, nominal, &sched).map_err(err))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct TemperedView {
    pub softmax: Vec<f64>,
    pub tempered: Vec<f64>,
    pub softmax_loss: f64,
    pub bitempered_loss: f64,
    /// Target-logit offsets and both losses along them, the other logits fixed.
    pub offsets: Vec<f64>,
    pub softmax_curve: Vec<f64>,
    pub bitempered_curve: Vec<f64>,
}

pub fn tempered_view(logits: &[f64], target: usize, t1: f64, t2: f64) -> Result<TemperedView, String> {
    let cfg = BiTemperedConfig::new(t1, t2);
    cfg.validate().map_err(err)?;
    let softmax = losses::tempered_softmax(logits, 1.0, cfg.lambda_iters, cfg.lambda_tol).map_err(err)?;
    let tempered = losses::tempered_softmax(logits, t2, cfg.lambda_iters, cfg.lambda_tol).map_err(err)?;
    let softmax_loss = losses::softmax_ce(logits, target).map_err(err)?.loss;
    let bitempered_loss = losses::bitempered_loss(logits, target, &cfg).map_err(err)?.loss;
    let offsets: Vec<f64> = (0..=120).map(|i| -6.0 + 0.1 * i as f64).collect();
    let mut softmax_curve = Vec::with_capacity(offsets.len());
    let mut bitempered_curve = Vec::with_capacity(offsets.len());
    for d in &offsets {
        let mut z = logits.to_vec();
        z[target] += d;
        softmax_curve.push(losses::softmax_ce(&z, target).map_err(err)?.loss);
        bitempered_curve.push(losses::bitempered_loss(&z, target, &cfg).map_err(err)?.loss);
    }
    Ok(TemperedView {
        softmax,
        tempered,
        softmax_loss,
        bitempered_loss,
        offsets,
        softmax_curve,
        bitempered_curve,
    })
}

#[derive(Debug, Serialize)]
pub struct DetCurve {
    pub eer: f64,
    pub min_dcf: f64,
    pub p_fa: Vec<f64>,
    pub p_miss: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct DetView {
    pub raw: DetCurve,
    pub zt: DetCurve,
}

fn curve(points: &[DetPoint]) -> DetCurve {
    let step = points.len().div_ceil(MAX_DET_POINTS).max(1);
    let mut kept: Vec<&DetPoint> = points.iter().step_by(step).collect();
    if let Some(last) = points.last() {
        if !std::ptr::eq(*kept.last().expect("non-empty"), last) {
            kept.push(last);
        }
    }
    DetCurve {
        eer: metrics::eer_from_points(points),
        min_dcf: metrics::min_dcf_from_points(points, &DcfParams::default()),
        p_fa: kept.iter().map(|p| p.p_fa).collect(),
        p_miss: kept.iter().map(|p| p.p_miss).collect(),
    }
}

fn mvn_set(set: &EmbeddingSet, stats: &embedops::MvnStats) -> Result<EmbeddingSet, String> {
    let rows = embedops::global_mvn(&set.rows_f64(), stats).map_err(err)?;
    EmbeddingSet::from_rows(set.ids().to_vec(), set.dim(), &rows).map_err(err)
}

/// Cosine scoring of synthetic features, with and without adaptive ZT-norm
/// against a cohort drawn from the training speakers.
pub fn zt_det_view(
    seed: u32,
    n_speakers: usize,
    cohort_size: usize,
    drop_top: usize,
    use_top: usize,
) -> Result<DetView, String> {
    let cfg = SynthConfig {
        n_speakers,
        utts_per_speaker: 10,
        n_val_speakers: 20,
        val_utts_per_speaker: 10,
        n_trials: 3000,
        seed: seed.into(),
        ..SynthConfig::default()
    };
    let data = synth::synth_generate(&cfg).map_err(err)?;
    let stats = embedops::compute_mvn_stats(&data.train.rows_f64()).map_err(err)?;
    let (train, val) = (mvn_set(&data.train, &stats)?, mvn_set(&data.val, &stats)?);
    let cohort_cfg = CohortConfig {
        size: cohort_size,
        seed: seed.into(),
        drop_top,
        use_top,
        ..CohortConfig::default()
    };
    let cohort = scoring::cohort_select(&train, &cohort_cfg).map_err(err)?;
    let raw = scoring::score_trials(&val, &data.trials, cohort_cfg.eps_norm).map_err(err)?;
    let zt = scoring::zt_norm(&raw, &val, &val, &cohort, &cohort_cfg).map_err(err)?;
    let labels = data.trials.labels().ok_or("synthetic trials carry labels")?;
    let det = |s: &[f64]| metrics::det_points(s, labels).map_err(err);
    Ok(DetView {
        raw: curve(&det(raw.scores())?),
        zt: curve(&det(zt.scores())?),
    })
}

fn js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn lr_curve(
    nominal: f64,
    warmup_frac: f64,
    constant_frac: f64,
    n_decay_steps: usize,
    decay_factor: f64,
    n_points: usize,
) -> Result<Vec<f64>, JsError> {
    lr_curve_values(
        nominal,
        warmup_frac,
        constant_frac,
        n_decay_steps,
        decay_factor,
        n_points,
    )
    .map_err(|e| JsError::new(&e))
}

/// JSON encoded [`TemperedView`].
#[wasm_bindgen]
pub fn tempered(logits: Vec<f64>, target: usize, t1: f64, t2: f64) -> Result<String, JsError> {
    js(tempered_view(&logits, target, t1, t2))
}

/// JSON encoded [`DetView`].
#[wasm_bindgen]
pub fn zt_det(
    seed: u32,
    n_speakers: usize,
    cohort_size: usize,
    drop_top: usize,
    use_top: usize,
) -> Result<String, JsError> {
    js(zt_det_view(seed, n_speakers, cohort_size, drop_top, use_top))
}
