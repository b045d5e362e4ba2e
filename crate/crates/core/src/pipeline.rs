//! End-to-end experiment on synthetic speakers.
//!
//! Stage 1 trains an extractor contrastively from two channel-augmented
//! views per utterance. Every stage-2 iteration then embeds the training
//! set with both networks, clusters the embeddings into pseudo-speakers,
//! and trains the next network A on labels derived from B and vice versa.
//! Network A sees a fresh random channel on every view; network B sees the
//! channel each utterance was recorded through.
//!
//! Configuration is TOML. Settings under `[iteration.N]` override the
//! stage-2 defaults from iteration N onward.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusteringConfig};
use crate::embedops::{self, MvnStats, DEFAULT_EPS_NORM};
use crate::error::{Error, Result};
use crate::losses::{BiTemperedConfig, ContrastiveConfig, MarginConfig, MarginVariant, Objective};
use crate::metrics::{self, DcfParams, Evaluation};
use crate::scoring::{self, CohortConfig};
use crate::synth::{self, AugmentedSource, ChannelPolicy, SynthConfig, SynthData};
use crate::trainer::{
    self, ClassifierConfig, ContrastiveTrainConfig, ExtractorParams, ExtractorShape, LrSchedule, SgdConfig,
};
use crate::types::{EmbeddingSet, ScoreSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Softmax,
    BiTempered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Settings {
    pub epochs: usize,
    pub batch_size: usize,
    pub nominal_lr: f64,
    pub weight_decay: f64,
    pub queue_capacity: usize,
    pub key_momentum: f64,
    pub scale: f64,
    pub view_noise: f64,
}

impl Default for Stage1Settings {
    fn default() -> Self {
        Stage1Settings {
            epochs: 30,
            batch_size: 32,
            nominal_lr: 0.5,
            weight_decay: 1e-4,
            queue_capacity: 1024,
            key_momentum: 0.99,
            scale: 10.0,
            view_noise: 0.02,
        }
    }
}

/// Resolved training settings of one stage-2 iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub nominal_lr: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub t1: f64,
    pub t2: f64,
    pub margin_variant: MarginVariant,
    pub margin_scale: f64,
    pub margin: f64,
    pub init_from_previous: bool,
    pub concat_labels: bool,
    pub chunk_scale: f64,
    pub view_noise: f64,
    /// Weight of utterances the two clusterings disagree on; unset disables
    /// agreement weighting.
    pub agreement_downweight: Option<f64>,
}

impl Default for IterationSettings {
    fn default() -> Self {
        IterationSettings {
            epochs: 20,
            batch_size: 32,
            nominal_lr: 0.2,
            weight_decay: 1e-4,
            loss: LossKind::BiTempered,
            t1: 0.9,
            t2: 1.1,
            margin_variant: MarginVariant::Subtractive,
            margin_scale: 30.0,
            margin: 0.2,
            init_from_previous: true,
            concat_labels: false,
            chunk_scale: 1.0,
            view_noise: 0.1,
            agreement_downweight: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationOverride {
    pub epochs: Option<usize>,
    pub nominal_lr: Option<f64>,
    pub loss: Option<LossKind>,
    pub margin_variant: Option<MarginVariant>,
    pub margin_scale: Option<f64>,
    pub margin: Option<f64>,
    pub init_from_previous: Option<bool>,
    pub concat_labels: Option<bool>,
    pub chunk_scale: Option<f64>,
    pub agreement_downweight: Option<f64>,
}

impl IterationSettings {
    fn apply(&mut self, o: &IterationOverride) {
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = o.$f { self.$f = v; })* };
        }
        take!(
            epochs,
            nominal_lr,
            loss,
            margin_variant,
            margin_scale,
            margin,
            init_from_previous,
            concat_labels,
            chunk_scale
        );
        if o.agreement_downweight.is_some() {
            self.agreement_downweight = o.agreement_downweight;
        }
    }

    pub fn classifier_config(&self, eps_norm: f64, seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd: SgdConfig {
                nominal_lr: self.nominal_lr,
                weight_decay: self.weight_decay,
                ..SgdConfig::default()
            },
            schedule: LrSchedule::default(),
            margin: MarginConfig {
                scale: self.margin_scale,
                margin: self.margin,
                variant: self.margin_variant,
            },
            objective: match self.loss {
                LossKind::Softmax => Objective::Softmax,
                LossKind::BiTempered => Objective::BiTempered(BiTemperedConfig::new(self.t1, self.t2)),
            },
            eps_norm,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSettings {
    /// System names: `iter0`, or `iter<N>A` / `iter<N>B`.
    pub members: Vec<String>,
}

impl Default for FusionSettings {
    fn default() -> Self {
        FusionSettings {
            members: vec!["iter2A".into(), "iter3A".into(), "iter3B".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub n_iterations: usize,
    pub n_pseudo: usize,
    /// k-means clusters per pseudo-speaker before merging.
    pub kmeans_factor: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub eps_norm: f64,
    pub synth: SynthConfig,
    pub stage1: Stage1Settings,
    pub stage2: IterationSettings,
    pub cohort: CohortConfig,
    pub dcf: DcfParams,
    pub fusion: FusionSettings,
    pub iteration: BTreeMap<String, IterationOverride>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            n_iterations: 3,
            n_pseudo: 64,
            kmeans_factor: 3,
            hidden_dim: 0,
            embed_dim: 16,
            eps_norm: DEFAULT_EPS_NORM,
            synth: SynthConfig::default(),
            stage1: Stage1Settings::default(),
            stage2: IterationSettings::default(),
            cohort: CohortConfig {
                size: 1000,
                ..CohortConfig::default()
            },
            dcf: DcfParams::default(),
            fusion: FusionSettings::default(),
            iteration: BTreeMap::new(),
        }
    }
}

/// Parses `iter0`, `iter<N>A` and `iter<N>B`.
fn parse_system_name(name: &str) -> Option<(usize, Option<char>)> {
    let rest = name.strip_prefix("iter")?;
    if rest == "0" {
        return Some((0, None));
    }
    let net = rest.chars().last()?;
    if net != 'A' && net != 'B' {
        return None;
    }
    let n: usize = rest[..rest.len() - 1].parse().ok()?;
    (n >= 1).then_some((n, Some(net)))
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.cohort.validate()?;
        self.dcf.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.n_pseudo < 2 || self.kmeans_factor == 0 {
            return bad("n_pseudo must be at least 2 and kmeans_factor positive".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        for key in self.iteration.keys() {
            match key.parse::<usize>() {
                Ok(i) if (1..=self.n_iterations).contains(&i) => {}
                _ => {
                    return bad(format!(
                        "override section [iteration.{key}] names no iteration in 1..={}",
                        self.n_iterations
                    ))
                }
            }
        }
        for m in &self.fusion.members {
            match parse_system_name(m) {
                Some((i, _)) if i <= self.n_iterations => {}
                _ => return bad(format!("fusion member `{m}` is not a system of this experiment")),
            }
        }
        for i in 1..=self.n_iterations {
            let s = self.settings_for(i);
            if let Some(d) = s.agreement_downweight {
                if !(0.0..=1.0).contains(&d) {
                    return bad(format!("iteration {i}: agreement_downweight must be in [0, 1]"));
                }
            }
            if !(s.chunk_scale > 0.0) {
                return bad(format!("iteration {i}: chunk_scale must be positive"));
            }
            s.classifier_config(self.eps_norm, 0).margin.validate()?;
        }
        Ok(())
    }

    /// Stage-2 settings of iteration `i` (1-based).
    pub fn settings_for(&self, i: usize) -> IterationSettings {
        let mut s = self.stage2;
        let mut overrides: Vec<(usize, &IterationOverride)> = self
            .iteration
            .iter()
            .filter_map(|(k, o)| k.parse::<usize>().ok().map(|n| (n, o)))
            .collect();
        overrides.sort_by_key(|(n, _)| *n);
        for (n, o) in overrides {
            if n <= i {
                s.apply(o);
            }
        }
        s
    }

    pub fn shape(&self) -> ExtractorShape {
        ExtractorShape {
            input_dim: self.synth.feature_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
        }
    }

    fn clustering(&self, seed: u64) -> ClusteringConfig {
        ClusteringConfig {
            kmeans_k: self.kmeans_factor * self.n_pseudo,
            eps_norm: self.eps_norm,
            ..ClusteringConfig::new(self.n_pseudo, seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Baseline,
    Iteration,
    Fusion,
    Fused,
}

impl Section {
    fn as_str(self) -> &'static str {
        match self {
            Section::Baseline => "baseline",
            Section::Iteration => "iteration",
            Section::Fusion => "fusion",
            Section::Fused => "fused",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "baseline" => Section::Baseline,
            "iteration" => Section::Iteration,
            "fusion" => Section::Fusion,
            "fused" => Section::Fused,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub section: Section,
    pub iteration: Option<usize>,
    pub system: String,
    pub raw: Option<Evaluation>,
    pub zt: Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub rows: Vec<ReportRow>,
}

const TSV_COLUMNS: &str = "section\titeration\tsystem\traw_eer\traw_min_dcf\tzt_eer\tzt_min_dcf";

impl ExperimentReport {
    fn rows_in(&self, section: Section) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.section == section)
    }

    pub fn row(&self, system: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.system == system && matches!(r.section, Section::Baseline | Section::Iteration))
    }

    /// Raw-score EER of a baseline or iteration system.
    pub fn raw_eer(&self, system: &str) -> Option<f64> {
        self.row(system).and_then(|r| r.raw).map(|e| e.eer)
    }

    pub fn fused(&self) -> Option<&ReportRow> {
        self.rows_in(Section::Fused).next()
    }

    pub fn fusion_members(&self) -> Vec<&ReportRow> {
        self.rows_in(Section::Fusion).collect()
    }

    pub fn to_tsv(&self) -> Result<String> {
        let mut out = String::new();
        for line in self.config.to_toml_string()?.lines() {
            writeln!(out, "## {line}").expect("write to string");
        }
        for (k, v) in &self.seeds {
            writeln!(out, "#seed\t{k}\t{v}").expect("write to string");
        }
        writeln!(out, "{TSV_COLUMNS}").expect("write to string");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| x.to_string());
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.section.as_str(),
                r.iteration.map_or("-".to_string(), |i| i.to_string()),
                r.system,
                opt(r.raw.map(|e| e.eer)),
                opt(r.raw.map(|e| e.min_dcf)),
                r.zt.eer,
                r.zt.min_dcf
            )
            .expect("write to string");
        }
        Ok(out)
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut toml_text = String::new();
        let mut seeds = BTreeMap::new();
        let mut rows = Vec::new();
        let mut seen_header = false;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let perr = |msg: String| Error::Parse { line: line_no, msg };
            if let Some(rest) = line.strip_prefix("## ") {
                toml_text.push_str(rest);
                toml_text.push('\n');
                continue;
            }
            if line == "##" {
                toml_text.push('\n');
                continue;
            }
            if let Some(rest) = line.strip_prefix("#seed\t") {
                let (k, v) = rest
                    .split_once('\t')
                    .ok_or_else(|| perr("seed line needs name and value".into()))?;
                seeds.insert(k.to_string(), v.parse().map_err(|e| perr(format!("seed: {e}")))?);
                continue;
            }
            if line == TSV_COLUMNS {
                seen_header = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(Error::ColumnCount {
                    line: line_no,
                    expected: "7",
                    got: cols.len(),
                });
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s == "-" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|e| perr(format!("`{s}`: {e}")))
                }
            };
            let section = Section::parse(cols[0]).ok_or_else(|| perr(format!("unknown section `{}`", cols[0])))?;
            let iteration = if cols[1] == "-" {
                None
            } else {
                Some(cols[1].parse().map_err(|e| perr(format!("iteration: {e}")))?)
            };
            let raw = match (num(cols[3])?, num(cols[4])?) {
                (Some(eer), Some(min_dcf)) => Some(Evaluation { eer, min_dcf }),
                (None, None) => None,
                _ => return Err(perr("raw columns must both be set or both be `-`".into())),
            };
            let zt = match (num(cols[5])?, num(cols[6])?) {
                (Some(eer), Some(min_dcf)) => Evaluation { eer, min_dcf },
                _ => return Err(perr("zt columns are required".into())),
            };
            rows.push(ReportRow {
                section,
                iteration,
                system: cols[2].to_string(),
                raw,
                zt,
            });
        }
        if !seen_header {
            return Err(Error::MalformedHeader("report has no column header".into()));
        }
        Ok(ExperimentReport {
            config: toml::from_str(&toml_text).map_err(|e| Error::Config(e.to_string()))?,
            seeds,
            rows,
        })
    }

    pub fn to_text(&self) -> String {
        let pct = |e: f64| format!("{:7.3}", 100.0 * e);
        let dcf = |e: f64| format!("{:7.4}", e);
        let mut out = String::new();
        writeln!(
            out,
            "{:<10} {:>4}  {:<8} {:>8} {:>8} {:>8} {:>8}",
            "section", "iter", "system", "EER%", "minDCF", "ztEER%", "ztDCF"
        )
        .expect("write to string");
        for r in &self.rows {
            let (re, rd) = r
                .raw
                .map_or(("      -".into(), "      -".into()), |e| (pct(e.eer), dcf(e.min_dcf)));
            writeln!(
                out,
                "{:<10} {:>4}  {:<8} {:>8} {:>8} {:>8} {:>8}",
                r.section.as_str(),
                r.iteration.map_or("-".to_string(), |i| i.to_string()),
                r.system,
                re,
                rd,
                pct(r.zt.eer),
                dcf(r.zt.min_dcf)
            )
            .expect("write to string");
        }
        let iters: Vec<&ReportRow> = self
            .rows_in(Section::Iteration)
            .filter(|r| r.system != "iter0")
            .collect();
        if let Some(first) = self.raw_eer("iter0") {
            for r in iters {
                if let (Some(raw), true) = (r.raw, first > 0.0) {
                    let d = metrics::rel_delta(first, raw.eer).unwrap_or(f64::NAN);
                    writeln!(out, "{} vs iter0: {d:+.1}% relative EER improvement", r.system).expect("write to string");
                }
            }
        }
        out.push_str("seeds:");
        for (k, v) in &self.seeds {
            write!(out, " {k}={v}").expect("write to string");
        }
        out.push('\n');
        out
    }
}

/// Synthetic data plus the fixed feature normalization.
pub struct Experiment {
    pub data: SynthData,
    pub mvn: MvnStats,
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Experiment> {
    cfg.validate()?;
    let data = synth::synth_generate(&cfg.synth)?;
    let mvn = embedops::compute_mvn_stats(&data.train.rows_f64())?;
    Ok(Experiment { data, mvn })
}

fn normalized(set: &EmbeddingSet, mvn: &MvnStats) -> Result<EmbeddingSet> {
    EmbeddingSet::from_rows(
        set.ids().to_vec(),
        set.dim(),
        &embedops::global_mvn(&set.rows_f64(), mvn)?,
    )
}

/// Raw and ZT-normalized evaluation of embeddings on the validation trials.
/// The cohort is drawn from the training embeddings.
fn evaluate_embeddings(
    name: &str,
    train: &EmbeddingSet,
    val: &EmbeddingSet,
    exp: &Experiment,
    cfg: &PipelineConfig,
) -> Result<(ReportRow, ScoreSet)> {
    let trials = &exp.data.trials;
    let raw = scoring::score_trials(val, trials, cfg.eps_norm)?;
    let cohort_cfg = CohortConfig {
        eps_norm: cfg.eps_norm,
        ..cfg.cohort
    };
    let cohort = scoring::cohort_select(train, &cohort_cfg)?;
    let zt = scoring::zt_norm(&raw, val, val, &cohort, &cohort_cfg)?;
    let row = ReportRow {
        section: Section::Iteration,
        iteration: None,
        system: name.to_string(),
        raw: Some(metrics::evaluate(&raw, &cfg.dcf)?),
        zt: metrics::evaluate(&zt, &cfg.dcf)?,
    };
    Ok((row, zt))
}

pub fn evaluate_system(
    name: &str,
    params: &ExtractorParams,
    exp: &Experiment,
    cfg: &PipelineConfig,
) -> Result<(ReportRow, ScoreSet)> {
    let train = trainer::embed_set(params, &exp.data.train, Some(&exp.mvn))?;
    let val = trainer::embed_set(params, &exp.data.val, Some(&exp.mvn))?;
    evaluate_embeddings(name, &train, &val, exp, cfg)
}

/// Cosine scoring directly on normalized features.
pub fn evaluate_baseline(exp: &Experiment, cfg: &PipelineConfig) -> Result<ReportRow> {
    let train = normalized(&exp.data.train, &exp.mvn)?;
    let val = normalized(&exp.data.val, &exp.mvn)?;
    let (mut row, _) = evaluate_embeddings("raw", &train, &val, exp, cfg)?;
    row.section = Section::Baseline;
    Ok(row)
}

pub fn stage1_config(cfg: &PipelineConfig) -> ContrastiveTrainConfig {
    let s = &cfg.stage1;
    ContrastiveTrainConfig {
        epochs: s.epochs,
        batch_size: s.batch_size,
        sgd: SgdConfig {
            nominal_lr: s.nominal_lr,
            weight_decay: s.weight_decay,
            ..SgdConfig::default()
        },
        schedule: LrSchedule::default(),
        contrastive: ContrastiveConfig {
            scale: s.scale,
            queue_capacity: s.queue_capacity,
            eps_norm: cfg.eps_norm,
        },
        key_momentum: s.key_momentum,
        seed: cfg.seed.wrapping_add(1),
    }
}

pub fn initial_params(cfg: &PipelineConfig, seed: u64) -> Result<ExtractorParams> {
    ExtractorParams::random(cfg.shape(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Contrastive bootstrap (iteration 0) from `init`.
pub fn run_stage1(init: &ExtractorParams, exp: &Experiment, cfg: &PipelineConfig) -> Result<ExtractorParams> {
    let source = AugmentedSource {
        data: &exp.data,
        policy: ChannelPolicy::Fresh,
        view_noise: cfg.stage1.view_noise,
        chunk_scale: 1.0,
        mvn: &exp.mvn,
    };
    Ok(trainer::train_contrastive(&source, init, &stage1_config(cfg))?.params)
}

fn iteration_seed(cfg: &PipelineConfig, i: usize, offset: u64) -> u64 {
    cfg.seed.wrapping_add(1000 * i as u64).wrapping_add(offset)
}

/// Starting weights of a stage-2 network: the previous weights, or a fresh
/// random draw when the iteration trains from scratch.
pub fn iteration_init(
    previous: &ExtractorParams,
    settings: &IterationSettings,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<ExtractorParams> {
    if settings.init_from_previous {
        Ok(previous.clone())
    } else {
        initial_params(cfg, seed)
    }
}

pub struct Stage2Output {
    pub rows: Vec<ReportRow>,
    /// Every trained network, named `iter<N>A` / `iter<N>B`.
    pub systems: Vec<(String, ExtractorParams)>,
    pub seeds: BTreeMap<String, u64>,
}

pub fn run_stage2(stage1: &ExtractorParams, exp: &Experiment, cfg: &PipelineConfig) -> Result<Stage2Output> {
    if cfg.n_iterations == 0 {
        return Err(Error::Config("stage 2 needs at least one iteration".into()));
    }
    let mut a = stage1.clone();
    let mut b = stage1.clone();
    let mut rows = Vec::new();
    let mut systems = Vec::new();
    let mut seeds = BTreeMap::new();
    let train_ids = exp.data.train.ids();
    for i in 1..=cfg.n_iterations {
        let s = cfg.settings_for(i);
        let emb_a = trainer::embed_set(&a, &exp.data.train, Some(&exp.mvn))?;
        let emb_b = trainer::embed_set(&b, &exp.data.train, Some(&exp.mvn))?;
        let cluster_seed = iteration_seed(cfg, i, 0);
        seeds.insert(format!("iter{i}.cluster"), cluster_seed);
        let (for_b, for_a) =
            clustering::cross_label_exchange(&emb_a, &emb_b, &cfg.clustering(cluster_seed), s.concat_labels)?;
        let (for_b, for_a) = match s.agreement_downweight {
            Some(d) => {
                let w = clustering::cluster_agreement_weights(&for_b, &for_a, d)?;
                (for_b.with_weights(Some(w.clone()))?, for_a.with_weights(Some(w))?)
            }
            None => (for_b, for_a),
        };
        let for_a = for_a.aligned_to(train_ids)?;
        let for_b = for_b.aligned_to(train_ids)?;

        let mut next = Vec::new();
        for (net, prev, labels, policy, off) in [
            ('A', &a, &for_a, ChannelPolicy::Fresh, 1),
            ('B', &b, &for_b, ChannelPolicy::Recorded, 2),
        ] {
            let init_seed = iteration_seed(cfg, i, off + 2);
            let train_seed = iteration_seed(cfg, i, off);
            seeds.insert(format!("iter{i}{net}.train"), train_seed);
            if !s.init_from_previous {
                seeds.insert(format!("iter{i}{net}.init"), init_seed);
            }
            let init = iteration_init(prev, &s, cfg, init_seed)?;
            let source = AugmentedSource {
                data: &exp.data,
                policy,
                view_noise: s.view_noise,
                chunk_scale: s.chunk_scale,
                mvn: &exp.mvn,
            };
            let run =
                trainer::train_classifier_with(&source, labels, &init, &s.classifier_config(cfg.eps_norm, train_seed))?;
            next.push(run.params);
        }
        b = next.pop().expect("two networks");
        a = next.pop().expect("two networks");
        for (net, params) in [('A', &a), ('B', &b)] {
            let name = format!("iter{i}{net}");
            let (mut row, _) = evaluate_system(&name, params, exp, cfg)?;
            row.iteration = Some(i);
            rows.push(row);
            systems.push((name, params.clone()));
        }
    }
    Ok(Stage2Output { rows, systems, seeds })
}

/// Per-system raw and ZT-normalized results plus the fusion (mean of the
/// ZT-normalized scores) of all systems.
pub fn run_fusion(
    systems: &[(String, ExtractorParams)],
    exp: &Experiment,
    cfg: &PipelineConfig,
) -> Result<Vec<ReportRow>> {
    if systems.is_empty() {
        return Err(Error::invalid("fusion needs at least one system"));
    }
    let mut rows = Vec::new();
    let mut normed = Vec::new();
    for (name, params) in systems {
        let (mut row, zt) = evaluate_system(name, params, exp, cfg)?;
        row.section = Section::Fusion;
        rows.push(row);
        normed.push(zt);
    }
    let fused = scoring::fuse(&normed)?;
    rows.push(ReportRow {
        section: Section::Fused,
        iteration: None,
        system: "fused".into(),
        raw: None,
        zt: metrics::evaluate(&fused, &cfg.dcf)?,
    });
    Ok(rows)
}

pub struct PipelineRun {
    pub report: ExperimentReport,
    pub systems: Vec<(String, ExtractorParams)>,
    pub mvn: MvnStats,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let exp = prepare(cfg)?;
    let mut seeds = BTreeMap::new();
    seeds.insert("seed".to_string(), cfg.seed);
    seeds.insert("synth".to_string(), cfg.synth.seed);
    seeds.insert("cohort".to_string(), cfg.cohort.seed);
    seeds.insert("stage1.init".to_string(), cfg.seed);
    seeds.insert("stage1.train".to_string(), stage1_config(cfg).seed);

    let mut rows = vec![evaluate_baseline(&exp, cfg)?];
    let init = initial_params(cfg, cfg.seed)?;
    let stage1 = run_stage1(&init, &exp, cfg)?;
    let (mut row0, _) = evaluate_system("iter0", &stage1, &exp, cfg)?;
    row0.iteration = Some(0);
    rows.push(row0);

    let mut systems = vec![("iter0".to_string(), stage1.clone())];
    if cfg.n_iterations > 0 {
        let out = run_stage2(&stage1, &exp, cfg)?;
        rows.extend(out.rows);
        systems.extend(out.systems);
        seeds.extend(out.seeds);
    }
    if !cfg.fusion.members.is_empty() {
        let members = cfg
            .fusion
            .members
            .iter()
            .map(|m| {
                systems
                    .iter()
                    .find(|(n, _)| n == m)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("fusion member `{m}` was not trained")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(run_fusion(&members, &exp, cfg)?);
    }
    Ok(PipelineRun {
        report: ExperimentReport {
            config: cfg.clone(),
            seeds,
            rows,
        },
        systems,
        mvn: exp.mvn,
    })
}
