//! Synthetic speakers for desk-scale experiments.
//!
//! An utterance of speaker `s` is
//!
//! ```text
//! x = mu_s + U h + e        (clean)
//! y = g_c * x + o_c         (recorded through channel c)
//! ```
//!
//! with speaker means on a sphere of radius `between_speaker_spread`,
//! session factors `h` living in a fixed low-rank subspace `U`, isotropic
//! residual noise `e`, and a per-channel gain and offset. Channel 0 is the
//! identity. Session and channel variation are both nuisances; only the
//! channel part can be removed by augmentation alone.
//!
//! Speaker directions scatter around a few group centers, each group with
//! its own tightness, so some speakers live in crowded regions of the
//! sphere and score high against many others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedops::MvnStats;
use crate::error::{Error, Result};
use crate::trainer::ExampleSource;
use crate::types::{EmbeddingSet, LabelSet, TrialList, UtteranceId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub feature_dim: usize,
    pub between_speaker_spread: f64,
    pub within_speaker_spread: f64,
    /// Rank of the session-variability subspace.
    pub session_rank: usize,
    pub session_spread: f64,
    pub n_channels: usize,
    pub channel_offset: f64,
    pub channel_gain: f64,
    /// Noise added by a non-identity channel on each pass.
    pub channel_noise: f64,
    pub n_val_speakers: usize,
    pub val_utts_per_speaker: usize,
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers: 50,
            utts_per_speaker: 20,
            feature_dim: 32,
            between_speaker_spread: 1.0,
            within_speaker_spread: 0.08,
            session_rank: 6,
            session_spread: 0.35,
            n_channels: 6,
            channel_offset: 0.25,
            channel_gain: 0.2,
            channel_noise: 0.05,
            n_val_speakers: 50,
            val_utts_per_speaker: 20,
            n_trials: 20000,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 || self.n_val_speakers < 2 {
            return Err(Error::invalid("need at least two speakers on each side"));
        }
        if self.utts_per_speaker == 0 || self.val_utts_per_speaker < 2 {
            return Err(Error::invalid(
                "need utterances per speaker (two or more for validation)",
            ));
        }
        if self.feature_dim == 0 || self.n_channels == 0 || self.n_trials == 0 {
            return Err(Error::invalid("feature_dim, n_channels and n_trials must be positive"));
        }
        if self.session_rank > self.feature_dim {
            return Err(Error::invalid("session rank exceeds feature dimension"));
        }
        let spreads = [self.between_speaker_spread, self.within_speaker_spread];
        if spreads.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("spreads must be positive"));
        }
        let others = [
            self.session_spread,
            self.channel_offset,
            self.channel_gain,
            self.channel_noise,
        ];
        if others.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid("session and channel parameters must be non-negative"));
        }
        Ok(())
    }
}

/// Per-channel affine perturbations. Channel 0 leaves input untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelBank {
    pub gains: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<f64>>,
    pub noise: f64,
}

impl ChannelBank {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    fn generate(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.feature_dim;
        let mut gains = vec![vec![1.0; d]];
        let mut offsets = vec![vec![0.0; d]];
        for _ in 1..cfg.n_channels {
            gains.push(
                (0..d)
                    .map(|_| 1.0 + cfg.channel_gain * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            offsets.push(
                (0..d)
                    .map(|_| cfg.channel_offset * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }
        ChannelBank {
            gains,
            offsets,
            noise: cfg.channel_noise,
        }
    }
}

/// Pass `x` through `channel`. Non-identity channels also add fresh noise
/// drawn from `rng`.
pub fn augment(x: &[f64], channel: usize, bank: &ChannelBank, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if channel >= bank.len() {
        return Err(Error::IndexOutOfRange {
            index: channel,
            len: bank.len(),
        });
    }
    crate::error::ensure_dim(bank.gains[channel].len(), x.len())?;
    if channel == 0 {
        return Ok(x.to_vec());
    }
    Ok(x.iter()
        .zip(&bank.gains[channel])
        .zip(&bank.offsets[channel])
        .map(|((v, g), o)| g * v + o + bank.noise * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub config: SynthConfig,
    pub bank: ChannelBank,
    /// Training utterances before any channel.
    pub train_clean: Vec<Vec<f64>>,
    /// Channel each training utterance was recorded through.
    pub train_channels: Vec<usize>,
    /// Training utterances as recorded.
    pub train: EmbeddingSet,
    pub train_truth: LabelSet,
    pub val: EmbeddingSet,
    pub val_truth: LabelSet,
    pub trials: TrialList,
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Speakers {
    ids: Vec<UtteranceId>,
    clean: Vec<Vec<f64>>,
    channels: Vec<usize>,
    recorded: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn speakers(
    prefix: &str,
    n_spk: usize,
    n_utt: usize,
    session: &[Vec<f64>],
    bank: &ChannelBank,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Speakers> {
    let d = cfg.feature_dim;
    let within = Normal::new(0.0, cfg.within_speaker_spread).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Speakers {
        ids: Vec::new(),
        clean: Vec::new(),
        channels: Vec::new(),
        recorded: Vec::new(),
        labels: Vec::new(),
    };
    for s in 0..n_spk {
        let mean: Vec<f64> = unit_vector(d, rng)
            .into_iter()
            .map(|v| v * cfg.between_speaker_spread)
            .collect();
        for u in 0..n_utt {
            let mut nuisance: Vec<f64> = (0..d).map(|_| within.sample(rng)).collect();
            for basis in session {
                let h: f64 = cfg.session_spread * rng.sample::<f64, _>(StandardNormal);
                for (ni, bi) in nuisance.iter_mut().zip(basis) {
                    *ni += h * bi;
                }
            }
            let x: Vec<f64> = mean.iter().zip(&nuisance).map(|(m, n)| m + n).collect();
            let c = rng.random_range(0..bank.len());
            out.recorded.push(augment(&x, c, bank, rng)?);
            out.ids.push(UtteranceId::new(format!("{prefix}{s:03}-{u:03}"))?);
            out.clean.push(x);
            out.channels.push(c);
            out.labels.push(s);
        }
    }
    Ok(out)
}

fn make_trials(val: &Speakers, n_trials: usize, rng: &mut ChaCha8Rng) -> Result<TrialList> {
    let n = val.ids.len();
    let mut by_speaker: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in val.labels.iter().enumerate() {
        if l >= by_speaker.len() {
            by_speaker.resize(l + 1, Vec::new());
        }
        by_speaker[l].push(i);
    }
    let mut pairs = Vec::with_capacity(n_trials);
    let mut labels = Vec::with_capacity(n_trials);
    for k in 0..n_trials {
        let target = k % 2 == 0;
        let (a, b) = if target {
            let spk = &by_speaker[rng.random_range(0..by_speaker.len())];
            let i = rng.random_range(0..spk.len());
            let mut j = rng.random_range(0..spk.len() - 1);
            if j >= i {
                j += 1;
            }
            (spk[i], spk[j])
        } else {
            loop {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                if val.labels[a] != val.labels[b] {
                    break (a, b);
                }
            }
        };
        pairs.push((val.ids[a].clone(), val.ids[b].clone()));
        labels.push(target);
    }
    TrialList::new(pairs, Some(labels))
}

/// Training set with true labels, and a validation set of unseen speakers
/// with an alternating target / nontarget trial list.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bank = ChannelBank::generate(cfg, &mut rng);
    let session: Vec<Vec<f64>> = (0..cfg.session_rank)
        .map(|_| unit_vector(cfg.feature_dim, &mut rng))
        .collect();
    let train = speakers(
        "spk",
        cfg.n_speakers,
        cfg.utts_per_speaker,
        &session,
        &bank,
        cfg,
        &mut rng,
    )?;
    let val = speakers(
        "val",
        cfg.n_val_speakers,
        cfg.val_utts_per_speaker,
        &session,
        &bank,
        cfg,
        &mut rng,
    )?;
    let trials = make_trials(&val, cfg.n_trials, &mut rng)?;
    let d = cfg.feature_dim;
    Ok(SynthData {
        config: *cfg,
        train_truth: LabelSet::from_labels(train.ids.clone(), train.labels)?,
        train: EmbeddingSet::from_rows(train.ids, d, &train.recorded)?,
        train_clean: train.clean,
        train_channels: train.channels,
        val_truth: LabelSet::from_labels(val.ids.clone(), val.labels)?,
        val: EmbeddingSet::from_rows(val.ids, d, &val.recorded)?,
        bank,
        trials,
    })
}

/// How a training source picks the channel of each view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPolicy {
    /// A new random channel for every view.
    Fresh,
    /// The channel the utterance was recorded through.
    Recorded,
}

/// Training views of the synthetic training set: channel per the policy,
/// extra per-view noise shrinking with `chunk_scale`, then MVN.
pub struct AugmentedSource<'a> {
    pub data: &'a SynthData,
    pub policy: ChannelPolicy,
    pub view_noise: f64,
    pub chunk_scale: f64,
    pub mvn: &'a MvnStats,
}

impl AugmentedSource<'_> {
    fn raw_view(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mut x = match self.policy {
            ChannelPolicy::Fresh => {
                let c = rng.random_range(0..self.data.bank.len());
                augment(&self.data.train_clean[index], c, &self.data.bank, rng)?
            }
            ChannelPolicy::Recorded => self.data.train.row_f64(index),
        };
        let sd = self.view_noise / self.chunk_scale.max(f64::MIN_POSITIVE).sqrt();
        for v in x.iter_mut() {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
        self.mvn.apply(&x)
    }
}

impl ExampleSource for AugmentedSource<'_> {
    fn len(&self) -> usize {
        self.data.train.len()
    }

    fn dim(&self) -> usize {
        self.data.train.dim()
    }

    fn view(&self, index: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        // dimensions are fixed at construction, so this cannot fail
        self.raw_view(index, rng).expect("view of a validated synthetic set")
    }
}
