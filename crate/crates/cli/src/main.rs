//! `selfsv` command line: synthetic data, extraction, clustering, scoring,
//! normalization, fusion, evaluation and the end-to-end experiment.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use selfsv::clustering::{self, ClusteringConfig};
use selfsv::metrics::{self, DcfParams};
use selfsv::pipeline::{self, PipelineConfig};
use selfsv::scoring::{self, CohortConfig};
use selfsv::trainer::{self, Checkpoint};
use selfsv::{io, synth, ScoreSet};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] selfsv::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "selfsv", version, about = "Self-supervised speaker verification backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct SeedArg {
    /// Random seed. Commands without randomness accept and ignore it.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speaker corpus.
    Synth {
        /// Pipeline config (TOML); only its `[synth]` table is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Run an extractor checkpoint over feature vectors.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Pseudo-label embeddings with k-means followed by agglomerative merging.
    Cluster {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        n_pseudo: usize,
        /// k-means cluster count before merging (default 3 x n_pseudo).
        #[arg(long)]
        kmeans_k: Option<usize>,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Cosine scoring of a trial list.
    Score {
        /// Embeddings holding both sides of every trial.
        #[arg(long)]
        embeddings: PathBuf,
        /// Separate test-side embeddings, when enroll and test live apart.
        #[arg(long)]
        test_embeddings: Option<PathBuf>,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Adaptive ZT-norm or S-norm of raw scores.
    Norm {
        #[arg(long, value_enum)]
        method: NormMethod,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        test_embeddings: Option<PathBuf>,
        /// Pool the cohort is sampled from.
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value_t = 1000)]
        cohort_size: usize,
        #[arg(long, default_value_t = 10)]
        drop_top: usize,
        #[arg(long, default_value_t = 200)]
        use_top: usize,
        /// Use every cohort score instead of the adaptive top slice.
        #[arg(long)]
        no_adaptive: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Average score files trial by trial.
    Fuse {
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// EER and minDCF of a score file against labelled trials.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        p_target: f64,
        #[arg(long, default_value_t = 1.0)]
        c_miss: f64,
        #[arg(long, default_value_t = 1.0)]
        c_fa: f64,
        /// Also write the DET points as TSV.
        #[arg(long)]
        det: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Full experiment: stage 1, iterative pseudo-labeling, fusion.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Write extractor checkpoints for every trained system.
        #[arg(long)]
        save_models: bool,
        /// Overrides the config's top-level seed when given.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NormMethod {
    Zt,
    S,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    match path {
        Some(p) => Ok(PipelineConfig::from_toml_str(&io::read_to_string(p)?)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_synth(config: Option<&Path>, out_dir: &Path, seed: u64) -> CliResult {
    let mut cfg = load_config(config)?.synth;
    cfg.seed = seed;
    let data = synth::synth_generate(&cfg)?;
    create_dir(out_dir)?;
    io::write_embeddings(&data.train, &out_dir.join("train.emb"))?;
    io::write_labels(&data.train_truth, &out_dir.join("train_labels.tsv"))?;
    io::write_embeddings(&data.val, &out_dir.join("val.emb"))?;
    io::write_trials(&data.trials, &out_dir.join("trials.tsv"))?;
    println!(
        "{} train utterances, {} validation utterances, {} trials",
        data.train.len(),
        data.val.len(),
        data.trials.len()
    );
    Ok(())
}

fn cmd_embed(model: &Path, input: &Path, out: &Path) -> CliResult {
    let Checkpoint { params, mvn } = trainer::load_checkpoint(model)?;
    let features = io::read_embeddings(input)?;
    let emb = trainer::embed_set(&params, &features, mvn.as_ref())?;
    io::write_embeddings(&emb, out)?;
    Ok(())
}

fn cmd_cluster(
    emb: &Path,
    n_pseudo: usize,
    kmeans_k: Option<usize>,
    restarts: usize,
    out: &Path,
    seed: u64,
) -> CliResult {
    let x = io::read_embeddings(emb)?;
    let mut cfg = ClusteringConfig::new(n_pseudo, seed);
    if let Some(k) = kmeans_k {
        cfg.kmeans_k = k;
    }
    cfg.restarts = restarts;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let labels = clustering::generate_pseudo_labels(&x, &cfg)?;
    io::write_labels(&labels, out)?;
    println!("{} utterances in {} clusters", labels.ids().len(), labels.n_clusters());
    Ok(())
}

fn read_sides(
    enroll: &Path,
    test: Option<&Path>,
) -> Result<(selfsv::EmbeddingSet, Option<selfsv::EmbeddingSet>), CliError> {
    let e = io::read_embeddings(enroll)?;
    let t = test.map(io::read_embeddings).transpose()?;
    Ok((e, t))
}

fn cmd_score(emb: &Path, test: Option<&Path>, trials: &Path, out: &Path) -> CliResult {
    let (e, t) = read_sides(emb, test)?;
    let trials = io::read_trials(trials)?;
    let eps = CohortConfig::default().eps_norm;
    let scores = scoring::score_trials_split(&e, t.as_ref().unwrap_or(&e), &trials, eps)?;
    io::write_scores(&scores, out)?;
    Ok(())
}

struct NormArgs<'a> {
    method: NormMethod,
    scores: &'a Path,
    embeddings: &'a Path,
    test: Option<&'a Path>,
    cohort: &'a Path,
    cfg: CohortConfig,
    out: &'a Path,
}

fn cmd_norm(a: NormArgs) -> CliResult {
    a.cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let raw = io::read_scores(a.scores)?;
    let (e, t) = read_sides(a.embeddings, a.test)?;
    let pool = io::read_embeddings(a.cohort)?;
    let cohort = scoring::cohort_select(&pool, &a.cfg)?;
    let test = t.as_ref().unwrap_or(&e);
    let (name, normed) = match a.method {
        NormMethod::Zt => ("zt", scoring::zt_norm(&raw, &e, test, &cohort, &a.cfg)?),
        NormMethod::S => ("s", scoring::s_norm(&raw, &e, test, &cohort, &a.cfg)?),
    };
    io::write_scores_with_header(&normed, &[a.cfg.describe(name)], a.out)?;
    Ok(())
}

fn cmd_fuse(inputs: &[PathBuf], out: &Path) -> CliResult {
    let sets = inputs
        .iter()
        .map(|p| io::read_scores(p))
        .collect::<selfsv::Result<Vec<ScoreSet>>>()?;
    io::write_scores(&scoring::fuse(&sets)?, out)?;
    Ok(())
}

fn cmd_eval(scores: &Path, trials: &Path, dcf: DcfParams, det: Option<&Path>) -> CliResult {
    dcf.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let trials = io::read_trials(trials)?;
    let labels = trials
        .labels()
        .ok_or_else(|| selfsv::Error::InvalidArgument("trial list carries no labels".into()))?
        .to_vec();
    let set = io::read_scores(scores)?.relabel(&trials)?;
    let points = metrics::det_points(set.scores(), &labels)?;
    let eer = metrics::eer_from_points(&points);
    let min_dcf = metrics::min_dcf_from_points(&points, &dcf);
    println!("EER {:.4} minDCF {:.4}", 100.0 * eer, min_dcf);
    if let Some(path) = det {
        let mut text = String::from("threshold\tp_miss\tp_fa\n");
        for p in &points {
            text.push_str(&format!("{}\t{}\t{}\n", p.threshold, p.p_miss, p.p_fa));
        }
        io::write_text(path, &text)?;
    }
    Ok(())
}

fn cmd_pipeline(config: Option<&Path>, out_dir: &Path, save_models: bool, seed: Option<u64>) -> CliResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let run = pipeline::run_pipeline(&cfg)?;
    create_dir(out_dir)?;
    let text = run.report.to_text();
    io::write_text(&out_dir.join("report.txt"), &text)?;
    io::write_text(&out_dir.join("report.tsv"), &run.report.to_tsv()?)?;
    if save_models {
        for (name, params) in &run.systems {
            let ckpt = Checkpoint {
                params: params.clone(),
                mvn: Some(run.mvn.clone()),
            };
            trainer::save_checkpoint(&ckpt, &out_dir.join(format!("{name}.ckpt")))?;
        }
    }
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth { config, out_dir, seed } => cmd_synth(config.as_deref(), &out_dir, seed.seed),
        Command::Embed { model, input, out, .. } => cmd_embed(&model, &input, &out),
        Command::Cluster {
            embeddings,
            n_pseudo,
            kmeans_k,
            restarts,
            out,
            seed,
        } => cmd_cluster(&embeddings, n_pseudo, kmeans_k, restarts, &out, seed.seed),
        Command::Score {
            embeddings,
            test_embeddings,
            trials,
            out,
            ..
        } => cmd_score(&embeddings, test_embeddings.as_deref(), &trials, &out),
        Command::Norm {
            method,
            scores,
            embeddings,
            test_embeddings,
            cohort,
            cohort_size,
            drop_top,
            use_top,
            no_adaptive,
            out,
            seed,
        } => cmd_norm(NormArgs {
            method,
            scores: &scores,
            embeddings: &embeddings,
            test: test_embeddings.as_deref(),
            cohort: &cohort,
            cfg: CohortConfig {
                size: cohort_size,
                seed: seed.seed,
                drop_top,
                use_top,
                adaptive_z: !no_adaptive,
                adaptive_t: !no_adaptive,
                ..CohortConfig::default()
            },
            out: &out,
        }),
        Command::Fuse { inputs, out, .. } => cmd_fuse(&inputs, &out),
        Command::Eval {
            scores,
            trials,
            p_target,
            c_miss,
            c_fa,
            det,
            ..
        } => cmd_eval(&scores, &trials, DcfParams { p_target, c_miss, c_fa }, det.as_deref()),
        Command::Pipeline {
            config,
            out_dir,
            save_models,
            seed,
        } => cmd_pipeline(config.as_deref(), &out_dir, save_models, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
