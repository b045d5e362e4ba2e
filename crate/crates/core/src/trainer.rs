//! Toy embedding extractor and its training loops.
//!
//! The extractor is an affine map, or a single tanh hidden layer followed by
//! an affine map. Training uses SGD with Nesterov momentum and weight decay
//! under a warmup / constant / step-halving learning-rate schedule, either
//! contrastively (momentum key encoder plus negative queue) or as a
//! classifier against pseudo-labels with cosine class representatives.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedops::{MvnStats, DEFAULT_EPS_NORM};
use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::io;
use crate::losses::{self, ContrastiveConfig, MarginConfig, Objective};
use crate::types::{EmbeddingSet, LabelSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorShape {
    pub input_dim: usize,
    /// 0 for a purely affine extractor.
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl ExtractorShape {
    pub fn linear(input_dim: usize, embed_dim: usize) -> Self {
        ExtractorShape {
            input_dim,
            hidden_dim: 0,
            embed_dim,
        }
    }

    fn first_out(&self) -> usize {
        if self.hidden_dim == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn n_params(&self) -> usize {
        let first = self.first_out() * (self.input_dim + 1);
        if self.hidden_dim == 0 {
            first
        } else {
            first + self.embed_dim * (self.hidden_dim + 1)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("extractor dimensions must be positive"));
        }
        Ok(())
    }
}

/// Extractor weights, flattened as `[W1, b1, W2, b2]` (row-major weights;
/// the second layer only when `hidden_dim > 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams {
    shape: ExtractorShape,
    values: Vec<f64>,
}

impl ExtractorParams {
    pub fn from_values(shape: ExtractorShape, values: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        ensure_dim(shape.n_params(), values.len())?;
        ensure_finite(&values, "extractor parameters")?;
        Ok(ExtractorParams { shape, values })
    }

    pub fn zeros(shape: ExtractorShape) -> Result<Self> {
        ExtractorParams::from_values(shape, vec![0.0; shape.n_params()])
    }

    /// Affine identity map (`dim -> dim`).
    pub fn identity(dim: usize) -> Result<Self> {
        let shape = ExtractorShape::linear(dim, dim);
        let mut values = vec![0.0; shape.n_params()];
        for i in 0..dim {
            values[i * dim + i] = 1.0;
        }
        ExtractorParams::from_values(shape, values)
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn random(shape: ExtractorShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        shape.validate()?;
        let mut values = Vec::with_capacity(shape.n_params());
        let mut layer = |rows: usize, cols: usize, values: &mut Vec<f64>| {
            let std = (1.0 / cols as f64).sqrt();
            for _ in 0..rows * cols {
                let z: f64 = StandardNormal.sample(rng);
                values.push(std * z);
            }
            values.extend(std::iter::repeat_n(0.0, rows));
        };
        layer(shape.first_out(), shape.input_dim, &mut values);
        if shape.hidden_dim > 0 {
            layer(shape.embed_dim, shape.hidden_dim, &mut values);
        }
        ExtractorParams::from_values(shape, values)
    }

    pub fn shape(&self) -> ExtractorShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Offsets of `(W1, b1, W2, b2)` blocks; the last two are empty for an
    /// affine extractor.
    fn offsets(&self) -> [usize; 4] {
        let s = self.shape;
        let w1 = s.first_out() * s.input_dim;
        let b1 = w1 + s.first_out();
        let w2 = b1 + s.embed_dim * s.hidden_dim;
        [w1, b1, w2, s.n_params()]
    }

    /// True for bias entries.
    pub fn bias_mask(&self) -> Vec<bool> {
        let [w1, b1, w2, b2] = self.offsets();
        let mut mask = vec![false; self.values.len()];
        mask[w1..b1].iter_mut().for_each(|m| *m = true);
        mask[w2..b2].iter_mut().for_each(|m| *m = true);
        mask
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| bias + crate::embedops::dot(&w[r * cols..(r + 1) * cols], x))
        .collect()
}

pub fn forward(params: &ExtractorParams, features: &[f64]) -> Result<Vec<f64>> {
    let s = params.shape;
    ensure_dim(s.input_dim, features.len())?;
    let [w1, b1, w2, b2] = params.offsets();
    let v = &params.values;
    let first = affine(&v[..w1], &v[w1..b1], features);
    if s.hidden_dim == 0 {
        return Ok(first);
    }
    let hidden: Vec<f64> = first.into_iter().map(f64::tanh).collect();
    Ok(affine(&v[b1..w2], &v[w2..b2], &hidden))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub param_grads: Vec<f64>,
    pub input_grad: Vec<f64>,
}

/// Gradients of `upstream . forward(params, features)` with respect to the
/// parameters and the input.
pub fn backward(params: &ExtractorParams, features: &[f64], upstream: &[f64]) -> Result<Backward> {
    let s = params.shape;
    ensure_dim(s.input_dim, features.len())?;
    ensure_dim(s.embed_dim, upstream.len())?;
    let [w1, b1, w2, b2] = params.offsets();
    let v = &params.values;
    let mut grads = vec![0.0; v.len()];

    // gradient at the output of the first affine layer
    let first_grad: Vec<f64> = if s.hidden_dim == 0 {
        upstream.to_vec()
    } else {
        let pre = affine(&v[..w1], &v[w1..b1], features);
        let hidden: Vec<f64> = pre.iter().map(|p| p.tanh()).collect();
        let h = s.hidden_dim;
        let mut dh = vec![0.0; h];
        for (r, &g) in upstream.iter().enumerate() {
            grads[w2 + r] += g;
            let row = b1 + r * h;
            for c in 0..h {
                grads[row + c] += g * hidden[c];
                dh[c] += g * v[row + c];
            }
        }
        debug_assert_eq!(w2 + upstream.len(), b2);
        dh.iter().zip(&hidden).map(|(d, y)| d * (1.0 - y * y)).collect()
    };

    let n_in = s.input_dim;
    let mut input_grad = vec![0.0; n_in];
    for (r, &g) in first_grad.iter().enumerate() {
        grads[w1 + r] += g;
        let row = r * n_in;
        for c in 0..n_in {
            grads[row + c] += g * features[c];
            input_grad[c] += g * v[row + c];
        }
    }
    Ok(Backward {
        param_grads: grads,
        input_grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub nominal_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Apply weight decay to bias terms too.
    pub decay_biases: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            nominal_lr: 0.0125,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            decay_biases: true,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nominal_lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(n: usize) -> Self {
        SgdState { velocity: vec![0.0; n] }
    }
}

/// One SGD update:
///
/// ```text
/// g' = g + wd * theta
/// v  = mu * v + g'
/// theta -= lr * (g' + mu * v)     (nesterov)
/// theta -= lr * v                 (plain momentum)
/// ```
pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut SgdState, lr: f64, cfg: &SgdConfig) -> Result<()> {
    sgd_step_masked(params, grads, state, lr, cfg, None)
}

/// [`sgd_step`] where weight decay is skipped for entries whose mask is
/// `false`.
pub fn sgd_step_masked(
    params: &mut [f64],
    grads: &[f64],
    state: &mut SgdState,
    lr: f64,
    cfg: &SgdConfig,
    decay_mask: Option<&[bool]>,
) -> Result<()> {
    ensure_dim(params.len(), grads.len())?;
    ensure_finite(grads, "gradient")?;
    if state.velocity.is_empty() {
        state.velocity = vec![0.0; params.len()];
    }
    ensure_dim(params.len(), state.velocity.len())?;
    let mu = cfg.momentum;
    for i in 0..params.len() {
        let decay = decay_mask.is_none_or(|m| m[i]);
        let g = if decay {
            grads[i] + cfg.weight_decay * params[i]
        } else {
            grads[i]
        };
        let v = mu * state.velocity[i] + g;
        state.velocity[i] = v;
        params[i] -= if cfg.nesterov { lr * (g + mu * v) } else { lr * v };
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_frac: f64,
    pub constant_frac: f64,
    pub n_decay_steps: usize,
    pub decay_factor: f64,
    /// Decay at the start of every decay segment (segment `i` runs at
    /// `nominal * factor^i`, ending at `factor^n`). When false the first
    /// segment keeps the nominal rate and the last runs at `factor^(n-1)`.
    pub decay_at_segment_start: bool,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_frac: 0.10,
            constant_frac: 0.2333,
            n_decay_steps: 10,
            decay_factor: 0.5,
            decay_at_segment_start: true,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac >= 0.0 && self.constant_frac >= 0.0 && self.warmup_frac + self.constant_frac < 1.0) {
            return Err(Error::invalid(
                "schedule fractions must be non-negative and sum below 1",
            ));
        }
        if self.n_decay_steps == 0 || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid("decay needs at least one step and a factor in (0, 1]"));
        }
        Ok(())
    }
}

/// Learning rate at training progress `progress` in `[0, 1]`.
pub fn lr_at(progress: f64, nominal: f64, sched: &LrSchedule) -> Result<f64> {
    sched.validate()?;
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::invalid(format!("progress {progress} outside [0, 1]")));
    }
    if progress < sched.warmup_frac {
        return Ok(nominal * progress / sched.warmup_frac);
    }
    let decay_start = sched.warmup_frac + sched.constant_frac;
    if progress < decay_start {
        return Ok(nominal);
    }
    let seg_len = (1.0 - decay_start) / sched.n_decay_steps as f64;
    let segment = (((progress - decay_start) / seg_len).floor() as usize).min(sched.n_decay_steps - 1);
    let exponent = if sched.decay_at_segment_start {
        segment + 1
    } else {
        segment
    };
    Ok(nominal * sched.decay_factor.powi(exponent as i32))
}

/// Momentum key encoder plus a FIFO queue of key embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MoCoState {
    pub key_params: ExtractorParams,
    queue: VecDeque<Vec<f64>>,
    capacity: usize,
    pub momentum: f64,
}

impl MoCoState {
    pub fn new(key_params: ExtractorParams, capacity: usize, momentum: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("queue capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid("key momentum must be in [0, 1]"));
        }
        Ok(MoCoState {
            key_params,
            queue: VecDeque::with_capacity(capacity),
            capacity,
            momentum,
        })
    }

    pub fn queue(&self) -> &VecDeque<Vec<f64>> {
        &self.queue
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `key = m * key + (1 - m) * query`, element-wise.
    pub fn momentum_update(&mut self, query: &ExtractorParams) -> Result<()> {
        if query.shape != self.key_params.shape {
            return Err(Error::invalid("query and key encoder shapes differ"));
        }
        let m = self.momentum;
        for (k, q) in self.key_params.values.iter_mut().zip(&query.values) {
            *k = m * *k + (1.0 - m) * q;
        }
        Ok(())
    }

    /// Append keys in order, evicting the oldest beyond capacity.
    pub fn queue_push(&mut self, keys: &[Vec<f64>]) -> Result<()> {
        let dim = self.key_params.shape.embed_dim;
        for k in keys {
            ensure_dim(dim, k.len())?;
        }
        for k in keys {
            if self.queue.len() == self.capacity {
                self.queue.pop_front();
            }
            self.queue.push_back(k.clone());
        }
        Ok(())
    }
}

/// Supplies training views of utterances. Augmenting sources draw their
/// perturbation from `rng`; plain sources ignore it.
pub trait ExampleSource {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn view(&self, index: usize, rng: &mut ChaCha8Rng) -> Vec<f64>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ExampleSource for EmbeddingSet {
    fn len(&self) -> usize {
        EmbeddingSet::len(self)
    }

    fn dim(&self) -> usize {
        EmbeddingSet::dim(self)
    }

    fn view(&self, index: usize, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.row_f64(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    pub margin: MarginConfig,
    pub objective: Objective,
    pub eps_norm: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 10,
            batch_size: 32,
            sgd: SgdConfig::default(),
            schedule: LrSchedule::default(),
            margin: MarginConfig::default(),
            objective: Objective::BiTempered(Default::default()),
            eps_norm: DEFAULT_EPS_NORM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierRun {
    pub params: ExtractorParams,
    /// Class representatives of the classification head.
    pub representatives: Vec<Vec<f64>>,
    /// Weighted mean loss of each epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train_classifier(
    features: &EmbeddingSet,
    labels: &LabelSet,
    init: &ExtractorParams,
    cfg: &ClassifierConfig,
) -> Result<ClassifierRun> {
    let labels = labels.aligned_to(features.ids())?;
    train_classifier_with(features, &labels, init, cfg)
}

/// Classifier training over an arbitrary example source. `labels` must be
/// in source order. Examples with zero weight are never visited.
pub fn train_classifier_with<S: ExampleSource + ?Sized>(
    source: &S,
    labels: &LabelSet,
    init: &ExtractorParams,
    cfg: &ClassifierConfig,
) -> Result<ClassifierRun> {
    cfg.sgd.validate()?;
    cfg.schedule.validate()?;
    cfg.margin.validate()?;
    ensure_dim(source.len(), labels.len())?;
    ensure_dim(init.shape.input_dim, source.dim())?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let used = labels.n_used();
    if used < 2 {
        return Err(Error::SingleClass(used));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init.clone();
    let active: Vec<usize> = (0..labels.len()).filter(|&i| labels.weight(i) > 0.0).collect();
    let n_classes = labels.n_clusters();
    let embed_dim = init.shape.embed_dim;

    let mut representatives: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..embed_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();

    if active.is_empty() || cfg.epochs == 0 {
        return Ok(ClassifierRun {
            params,
            representatives,
            epoch_losses: Vec::new(),
        });
    }

    let decay_mask = (!cfg.sgd.decay_biases).then(|| params.bias_mask().iter().map(|b| !b).collect::<Vec<_>>());
    let mut param_state = SgdState::new(params.values.len());
    let mut rep_state = SgdState::new(n_classes * embed_dim);
    let batches_per_epoch = active.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order = active.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut param_grad = vec![0.0; params.values.len()];
            let mut rep_grad = vec![0.0; n_classes * embed_dim];
            let mut batch_losses = Vec::with_capacity(batch.len());
            let mut batch_weights = Vec::with_capacity(batch.len());
            let n = batch.len() as f64;
            for &i in batch {
                let w = labels.weight(i);
                let x = source.view(i, &mut rng);
                let e = forward(&params, &x)?;
                let out = losses::margin_classifier_loss(
                    &e,
                    &representatives,
                    labels.labels()[i],
                    &cfg.margin,
                    &cfg.objective,
                    cfg.eps_norm,
                )?;
                batch_losses.push(out.loss);
                batch_weights.push(w);
                let back = backward(&params, &x, &out.d_embedding)?;
                for (g, d) in param_grad.iter_mut().zip(&back.param_grads) {
                    *g += w * d / n;
                }
                for (k, dr) in out.d_representatives.iter().enumerate() {
                    for (g, d) in rep_grad[k * embed_dim..(k + 1) * embed_dim].iter_mut().zip(dr) {
                        *g += w * d / n;
                    }
                }
            }
            epoch_loss += losses::weighted_mean(&batch_losses, Some(&batch_weights))? * n;

            let lr = lr_at(step as f64 / total_steps as f64, cfg.sgd.nominal_lr, &cfg.schedule)?;
            sgd_step_masked(
                &mut params.values,
                &param_grad,
                &mut param_state,
                lr,
                &cfg.sgd,
                decay_mask.as_deref(),
            )?;
            let mut flat: Vec<f64> = representatives.concat();
            sgd_step(&mut flat, &rep_grad, &mut rep_state, lr, &cfg.sgd)?;
            for (k, rep) in representatives.iter_mut().enumerate() {
                rep.copy_from_slice(&flat[k * embed_dim..(k + 1) * embed_dim]);
            }
            step += 1;
        }
        epoch_losses.push(epoch_loss / active.len() as f64);
    }
    Ok(ClassifierRun {
        params,
        representatives,
        epoch_losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    pub contrastive: ContrastiveConfig,
    pub key_momentum: f64,
    pub seed: u64,
}

impl Default for ContrastiveTrainConfig {
    fn default() -> Self {
        ContrastiveTrainConfig {
            epochs: 1,
            batch_size: 8,
            sgd: SgdConfig::default(),
            schedule: LrSchedule::default(),
            contrastive: ContrastiveConfig::default(),
            key_momentum: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveRun {
    pub params: ExtractorParams,
    pub moco: MoCoState,
    pub epoch_losses: Vec<f64>,
    /// Largest queue length observed after any push.
    pub max_queue_len: usize,
    pub steps: usize,
}

/// Momentum-contrast training. Each utterance yields two views from
/// `source`; the query view goes through the trained encoder, the key view
/// through the momentum encoder, and the queue supplies the negatives.
/// After every batch: SGD on the query encoder, momentum update of the key
/// encoder, then the batch keys enter the queue.
pub fn train_contrastive<S: ExampleSource + ?Sized>(
    source: &S,
    init: &ExtractorParams,
    cfg: &ContrastiveTrainConfig,
) -> Result<ContrastiveRun> {
    cfg.sgd.validate()?;
    cfg.schedule.validate()?;
    ensure_dim(init.shape.input_dim, source.dim())?;
    if source.len() < 2 {
        return Err(Error::invalid("contrastive training needs at least two utterances"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init.clone();
    let mut moco = MoCoState::new(init.clone(), cfg.contrastive.queue_capacity, cfg.key_momentum)?;
    let decay_mask = (!cfg.sgd.decay_biases).then(|| params.bias_mask().iter().map(|b| !b).collect::<Vec<_>>());
    let mut state = SgdState::new(params.values.len());
    let n = source.len();
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut max_queue_len = 0;
    let mut step = 0usize;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.values.len()];
            let mut keys = Vec::with_capacity(batch.len());
            let bn = batch.len() as f64;
            for &i in batch {
                let xq = source.view(i, &mut rng);
                let xk = source.view(i, &mut rng);
                let q = forward(&params, &xq)?;
                let k = forward(&moco.key_params, &xk)?;
                let out = losses::moco_infonce(&q, &k, moco.queue.iter().map(|v| v.as_slice()), &cfg.contrastive)?;
                epoch_loss += out.loss;
                let back = backward(&params, &xq, &out.grad)?;
                for (g, d) in grad.iter_mut().zip(&back.param_grads) {
                    *g += d / bn;
                }
                keys.push(k);
            }
            let lr = lr_at(step as f64 / total_steps as f64, cfg.sgd.nominal_lr, &cfg.schedule)?;
            sgd_step_masked(
                &mut params.values,
                &grad,
                &mut state,
                lr,
                &cfg.sgd,
                decay_mask.as_deref(),
            )?;
            moco.momentum_update(&params)?;
            moco.queue_push(&keys)?;
            max_queue_len = max_queue_len.max(moco.queue.len());
            step += 1;
        }
        epoch_losses.push(epoch_loss / n as f64);
    }
    Ok(ContrastiveRun {
        params,
        moco,
        epoch_losses,
        max_queue_len,
        steps: step,
    })
}

/// Embed every row of `features` (optionally MVN-normalized first).
pub fn embed_set(params: &ExtractorParams, features: &EmbeddingSet, mvn: Option<&MvnStats>) -> Result<EmbeddingSet> {
    let mut rows = Vec::with_capacity(features.len());
    for i in 0..features.len() {
        let mut x = features.row_f64(i);
        if let Some(stats) = mvn {
            x = stats.apply(&x)?;
        }
        rows.push(forward(params, &x)?);
    }
    EmbeddingSet::from_rows(features.ids().to_vec(), params.shape.embed_dim, &rows)
}

/// Extractor checkpoint: parameters (stored single precision in the
/// embedding container, one row) plus the feature normalization the
/// extractor expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ExtractorParams,
    pub mvn: Option<MvnStats>,
}

pub fn checkpoint_meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let s = ckpt.params.shape;
    let data: Vec<f32> = ckpt.params.values.iter().map(|&v| v as f32).collect();
    let bytes = io::encode_matrix(data.len(), 1, &data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mut meta = format!(
        "input_dim = {}\nhidden_dim = {}\nembed_dim = {}\n",
        s.input_dim, s.hidden_dim, s.embed_dim
    );
    if let Some(mvn) = &ckpt.mvn {
        meta.push_str(&format!(
            "mvn_mean = {}\nmvn_std = {}\n",
            join_floats(&mvn.mean),
            join_floats(&mvn.std)
        ));
    }
    io::write_text(&checkpoint_meta_path(path), &meta)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dim, rows, data) = io::decode_matrix(&bytes)?;
    if rows != 1 {
        return Err(Error::MalformedHeader(format!(
            "checkpoint has {rows} rows, expected 1"
        )));
    }
    let meta_path = checkpoint_meta_path(path);
    let meta = io::read_to_string(&meta_path)?;
    let mut fields = std::collections::HashMap::new();
    for (n, line) in meta.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            msg: "expected key = value".into(),
        })?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get_usize = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("checkpoint metadata lacks `{k}`")))
    };
    let shape = ExtractorShape {
        input_dim: get_usize("input_dim")?,
        hidden_dim: get_usize("hidden_dim")?,
        embed_dim: get_usize("embed_dim")?,
    };
    ensure_dim(shape.n_params(), dim)?;
    let floats = |k: &str| -> Result<Option<Vec<f64>>> {
        fields
            .get(k)
            .map(|v| {
                v.split_whitespace()
                    .map(|x| {
                        x.parse::<f64>()
                            .map_err(|_| Error::MalformedHeader(format!("bad float in `{k}`")))
                    })
                    .collect()
            })
            .transpose()
    };
    let mvn = match (floats("mvn_mean")?, floats("mvn_std")?) {
        (Some(mean), Some(std)) => {
            ensure_dim(mean.len(), std.len())?;
            Some(MvnStats { mean, std })
        }
        (None, None) => None,
        _ => {
            return Err(Error::MalformedHeader(
                "mvn_mean and mvn_std must appear together".into(),
            ))
        }
    };
    let params = ExtractorParams::from_values(shape, data.into_iter().map(f64::from).collect())?;
    Ok(Checkpoint { params, mvn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ids;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_and_zero_extractors() {
        let p = ExtractorParams::identity(3).unwrap();
        assert_eq!(forward(&p, &[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        let z = ExtractorParams::zeros(ExtractorShape {
            input_dim: 3,
            hidden_dim: 4,
            embed_dim: 2,
        })
        .unwrap();
        assert_eq!(forward(&z, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(forward(&p, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for shape in [
            ExtractorShape::linear(4, 3),
            ExtractorShape {
                input_dim: 4,
                hidden_dim: 5,
                embed_dim: 3,
            },
        ] {
            let mut r = rng(9);
            let mut p = ExtractorParams::random(shape, &mut r).unwrap();
            for v in p.values_mut() {
                *v += r.random_range(-0.1..0.1);
            }
            let x: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let up: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let b = backward(&p, &x, &up).unwrap();
            let f = |p: &ExtractorParams, x: &[f64]| crate::embedops::dot(&forward(p, x).unwrap(), &up);
            let h = 1e-5;
            for k in 0..p.values().len() {
                let mut pp = p.clone();
                pp.values_mut()[k] += h;
                let mut pm = p.clone();
                pm.values_mut()[k] -= h;
                let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
                assert!((fd - b.param_grads[k]).abs() < 1e-8, "param {k}");
            }
            for k in 0..4 {
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                let fd = (f(&p, &xp) - f(&p, &xm)) / (2.0 * h);
                assert!((fd - b.input_grad[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sgd_fixed_point_and_unrolled_updates() {
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0, -2.0];
        let mut s = SgdState::new(2);
        sgd_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.velocity, vec![0.0, 0.0]);

        let mut p = vec![1.0, -2.0];
        let mut s = SgdState::new(2);
        sgd_step(&mut p, &[0.5, 1.0], &mut s, 0.1, &cfg).unwrap();
        assert!((p[0] - (1.0 - 0.1 * 1.9 * 0.5)).abs() < 1e-15);
        assert!((p[1] - (-2.0 - 0.1 * 1.9 * 1.0)).abs() < 1e-15);

        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut p = vec![3.0];
        sgd_step(&mut p, &[0.0], &mut SgdState::new(1), 0.5, &cfg).unwrap();
        assert!((p[0] - 3.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-15);

        let mut p = vec![3.0];
        sgd_step(&mut p, &[1.0], &mut SgdState::new(1), 0.0, &SgdConfig::default()).unwrap();
        assert_eq!(p, vec![3.0]);
        assert!(sgd_step(&mut p, &[f64::NAN], &mut SgdState::new(1), 0.1, &cfg).is_err());
    }

    #[test]
    fn decay_mask_skips_biases() {
        let p = ExtractorParams::identity(2).unwrap();
        let mask: Vec<bool> = p.bias_mask().iter().map(|b| !b).collect();
        let mut v = p.values().to_vec();
        let n = v.len();
        v[n - 1] = 1.0;
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.5,
            ..Default::default()
        };
        sgd_step_masked(&mut v, &vec![0.0; n], &mut SgdState::new(n), 1.0, &cfg, Some(&mask)).unwrap();
        assert_eq!(v[n - 1], 1.0);
        assert_eq!(v[0], 0.5);
    }

    #[test]
    fn lr_schedule_examples() {
        let s = LrSchedule::default();
        assert_eq!(lr_at(0.0, 0.0125, &s).unwrap(), 0.0);
        assert!((lr_at(0.05, 1.0, &s).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(lr_at(0.20, 0.0125, &s).unwrap(), 0.0125);
        assert_eq!(lr_at(1.0, 0.0125, &s).unwrap(), 0.0125 / 1024.0);
        assert_eq!(lr_at(0.34, 0.0125, &s).unwrap(), 0.0125 / 2.0);
        let late = LrSchedule {
            decay_at_segment_start: false,
            ..s
        };
        assert_eq!(lr_at(0.34, 0.0125, &late).unwrap(), 0.0125);
        assert_eq!(lr_at(1.0, 0.0125, &late).unwrap(), 0.0125 / 512.0);
        assert!(lr_at(1.5, 0.0125, &s).is_err());
        assert!(lr_at(-0.1, 0.0125, &s).is_err());
    }

    #[test]
    fn lr_schedule_shape() {
        let s = LrSchedule::default();
        let mut prev = f64::INFINITY;
        let mut max: f64 = 0.0;
        for i in 0..=10_000 {
            let p = i as f64 / 10_000.0;
            let lr = lr_at(p, 0.1, &s).unwrap();
            max = max.max(lr);
            if p >= 0.3333 {
                assert!(lr <= prev);
                prev = lr;
            }
        }
        assert_eq!(max, 0.1);
    }

    #[test]
    fn momentum_update_examples() {
        let shape = ExtractorShape::linear(1, 1);
        let q = ExtractorParams::from_values(shape, vec![1.0, 1.0]).unwrap();
        let k0 = ExtractorParams::zeros(shape).unwrap();
        let mut m = MoCoState::new(k0.clone(), 4, 1.0).unwrap();
        m.momentum_update(&q).unwrap();
        assert_eq!(m.key_params, k0);
        let mut m = MoCoState::new(k0.clone(), 4, 0.0).unwrap();
        m.momentum_update(&q).unwrap();
        assert_eq!(m.key_params, q);
        let mut m = MoCoState::new(k0, 4, 0.999).unwrap();
        m.momentum_update(&q).unwrap();
        assert!((m.key_params.values()[0] - 0.001).abs() < 1e-15);
        let other = ExtractorParams::zeros(ExtractorShape::linear(2, 1)).unwrap();
        assert!(m.momentum_update(&other).is_err());
    }

    #[test]
    fn queue_ring_semantics() {
        let key = ExtractorParams::zeros(ExtractorShape::linear(1, 1)).unwrap();
        let mut m = MoCoState::new(key, 4, 0.9).unwrap();
        let batch: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        m.queue_push(&batch).unwrap();
        assert_eq!(m.queue().len(), 4);
        assert_eq!(m.queue().front().unwrap(), &vec![1.0]);
        m.queue_push(&[]).unwrap();
        assert_eq!(m.queue().len(), 4);
        let exact: Vec<Vec<f64>> = (10..14).map(|i| vec![i as f64]).collect();
        m.queue_push(&exact).unwrap();
        assert_eq!(m.queue().iter().cloned().collect::<Vec<_>>(), exact);
        assert!(m.queue_push(&[vec![1.0, 2.0]]).is_err());
    }

    fn two_class_data(seed: u64) -> (EmbeddingSet, LabelSet) {
        let mut r = rng(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut names = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let center = if c == 0 { [2.0, 0.0, 0.5] } else { [0.0, 2.0, 0.5] };
            rows.push(
                center
                    .iter()
                    .map(|v| v + r.random_range(-0.3..0.3))
                    .collect::<Vec<f64>>(),
            );
            labels.push(c);
            names.push(format!("u{i}"));
        }
        let ids = ids(&names).unwrap();
        (
            EmbeddingSet::from_rows(ids.clone(), 3, &rows).unwrap(),
            LabelSet::new(ids, labels, 2, None).unwrap(),
        )
    }

    #[test]
    fn classifier_loss_drops_on_separable_classes() {
        let (x, l) = two_class_data(1);
        let init = ExtractorParams::random(ExtractorShape::linear(3, 4), &mut rng(2)).unwrap();
        let cfg = ClassifierConfig {
            epochs: 30,
            batch_size: 8,
            sgd: SgdConfig {
                nominal_lr: 0.05,
                ..Default::default()
            },
            ..Default::default()
        };
        let run = train_classifier(&x, &l, &init, &cfg).unwrap();
        let first = run.epoch_losses[0];
        let last = *run.epoch_losses.last().unwrap();
        assert!(last <= 0.5 * first, "{first} -> {last}");
        let again = train_classifier(&x, &l, &init, &cfg).unwrap();
        assert_eq!(run, again);
    }

    #[test]
    fn zero_weights_leave_parameters_untouched() {
        let (x, l) = two_class_data(1);
        let l = l.with_weights(Some(vec![0.0; l.len()])).unwrap();
        let init = ExtractorParams::random(ExtractorShape::linear(3, 4), &mut rng(2)).unwrap();
        let run = train_classifier(&x, &l, &init, &ClassifierConfig::default()).unwrap();
        assert_eq!(run.params, init);
    }

    #[test]
    fn single_class_is_rejected() {
        let (x, l) = two_class_data(1);
        let l = LabelSet::new(l.ids().to_vec(), vec![0; l.len()], 1, None).unwrap();
        let init = ExtractorParams::identity(3).unwrap();
        assert!(matches!(
            train_classifier(&x, &l, &init, &ClassifierConfig::default()),
            Err(Error::SingleClass(1))
        ));
    }

    #[test]
    fn contrastive_zero_momentum_and_queue_bound() {
        let (x, _) = two_class_data(3);
        let init = ExtractorParams::random(ExtractorShape::linear(3, 4), &mut rng(4)).unwrap();
        let cfg = ContrastiveTrainConfig {
            epochs: 3,
            batch_size: 8,
            key_momentum: 0.0,
            contrastive: ContrastiveConfig {
                queue_capacity: 12,
                ..Default::default()
            },
            ..Default::default()
        };
        let run = train_contrastive(&x, &init, &cfg).unwrap();
        assert_eq!(run.moco.key_params, run.params);
        assert_eq!(run.max_queue_len, 12);
        assert!(run.moco.queue().len() <= 12);

        let none = train_contrastive(&x, &init, &ContrastiveTrainConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(none.params, init);
        assert_eq!(none.steps, 0);
    }

    #[test]
    fn checkpoint_roundtrip_at_storage_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let shape = ExtractorShape {
            input_dim: 3,
            hidden_dim: 2,
            embed_dim: 2,
        };
        let p = ExtractorParams::random(shape, &mut rng(5)).unwrap();
        let p = ExtractorParams::from_values(shape, p.values().iter().map(|&v| v as f32 as f64).collect()).unwrap();
        let ckpt = Checkpoint {
            params: p,
            mvn: Some(MvnStats {
                mean: vec![0.1, 0.2, 1.0 / 3.0],
                std: vec![1.0, 2.0, 3.0],
            }),
        };
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }
}
