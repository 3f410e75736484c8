//! Command-line front end for the 2D temporal adjacent network.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tan2d_core::checkpoint::Checkpoint;
use tan2d_core::clips::{read_feature_file, sample_clips};
use tan2d_core::corpus::{load_samples, CorpusManifest, Split};
use tan2d_core::eval::{evaluate, predict_top_n, upper_bound, EvalSpec, GroundTruth};
use tan2d_core::model::Runtime;
use tan2d_core::synth::generate_synthetic_corpus;
use tan2d_core::temporal_map::CandidateMask;
use tan2d_core::train::{train, TrainData, TrainOptions};
use tan2d_core::{Result, TanError};

pub use config::RunConfig;
use config::parse_list;

pub const THREADS_ENV: &str = "TAN2D_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tan2d", version, about = "Moment localization with 2D temporal adjacent networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with planted activities.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of videos.
        #[arg(long)]
        videos: Option<usize>,
    },
    /// Train a model and write checkpoints plus metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a checkpoint on one split of a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// train, val or test.
        #[arg(long)]
        split: Option<String>,
    },
    /// Rank moments of one video for a free-text query.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Clip feature file.
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        query: String,
    },
    /// Dump the candidate mask for one resolution.
    InspectCandidates {
        #[command(flatten)]
        common: Common,
    },
    /// Ideal-model scores under clip discretization and the candidate mask.
    UpperBound {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Clip resolution N; a comma list for `upper-bound`.
    #[arg(long)]
    pub n_clips: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma list of n for Rank n@m; `predict` uses the largest.
    #[arg(long)]
    pub top_n: Option<String>,
    #[arg(long)]
    pub nms_threshold: Option<f64>,
    /// Comma list of m for Rank n@m.
    #[arg(long)]
    pub iou_thresholds: Option<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::InspectCandidates { .. } => "inspect-candidates",
            Command::UpperBound { .. } => "upper-bound",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Generate { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Predict { common, .. }
            | Command::InspectCandidates { common }
            | Command::UpperBound { common, .. } => common,
        }
    }
}

/// Merge the config file and flags into one validated configuration.
pub fn resolve(cmd: &Command) -> Result<RunConfig> {
    let c = cmd.common();
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
        cfg.generator.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out = Some(out.clone());
    }
    if let Some(ck) = &c.checkpoint {
        cfg.checkpoint = Some(ck.clone());
    }
    if let Some(list) = &c.n_clips {
        let ns: Vec<usize> = parse_list("n-clips", list)?;
        if let Command::UpperBound { .. } = cmd {
            cfg.upper_bound_clips = ns;
        } else if let [n] = ns[..] {
            cfg.train.n_clips = n;
        } else {
            return Err(TanError::Config("--n-clips takes a single value here".into()));
        }
    }
    if let Some(list) = &c.top_n {
        cfg.top_n = parse_list("top-n", list)?;
    }
    if let Some(t) = c.nms_threshold {
        cfg.train.nms_threshold = t;
    }
    if let Some(list) = &c.iou_thresholds {
        cfg.iou_thresholds = parse_list("iou-thresholds", list)?;
    }
    match cmd {
        Command::Generate { videos, .. } => {
            if let Some(v) = videos {
                cfg.generator.n_videos = *v;
            }
        }
        Command::Train { manifest, epochs, lr, .. } => {
            if let Some(m) = manifest {
                cfg.manifest = Some(m.clone());
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(lr) = lr {
                cfg.train.lr = *lr;
            }
        }
        Command::Eval { manifest, split, .. } => {
            if let Some(m) = manifest {
                cfg.manifest = Some(m.clone());
            }
            if let Some(s) = split {
                cfg.split = Split::ALL
                    .into_iter()
                    .find(|x| x.as_str() == s)
                    .ok_or_else(|| TanError::Config(format!("unknown split {s:?}")))?;
            }
        }
        Command::UpperBound { manifest, .. } => {
            if let Some(m) = manifest {
                cfg.manifest = Some(m.clone());
            }
        }
        Command::Predict { .. } | Command::InspectCandidates { .. } => {}
    }
    for p in [&mut cfg.manifest, &mut cfg.out, &mut cfg.checkpoint, &mut cfg.embedding_file]
        .into_iter()
        .flatten()
    {
        *p = std::path::absolute(&*p).map_err(|e| TanError::io(&*p, e))?;
    }
    cfg.top_n.sort_unstable();
    cfg.top_n.dedup();
    cfg.iou_thresholds.sort_by(f64::total_cmp);
    cfg.iou_thresholds.dedup();
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
    config: &'a RunConfig,
}

/// Worker count: `TAN2D_THREADS` when set, otherwise the machine's parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(TanError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn out_dir(cfg: &RunConfig, cmd: &str) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cmd));
    fs::create_dir_all(&dir).map_err(|e| TanError::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| TanError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_text(path, &text)
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| TanError::Config(format!("{what} is required")))
}

/// Execute one command, returning what it prints on stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let cmd = &cli.command;
    let cfg = resolve(cmd)?;
    let threads = thread_count()?;
    let dir = out_dir(&cfg, cmd.name())?;
    write_json(
        &dir.join("run.json"),
        &RunRecord {
            command: cmd.name(),
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.train.seed,
            threads,
            config: &cfg,
        },
    )?;
    match cmd {
        Command::Generate { .. } => {
            let corpus = generate_synthetic_corpus(&cfg.generator)?;
            corpus.write(&dir)?;
            Ok(serde_json::to_string_pretty(&corpus.report()).expect("report serializes") + "\n")
        }
        Command::Train { .. } => cmd_train(&cfg, &dir, threads),
        Command::Eval { .. } => cmd_eval(&cfg, cmd.common().config.is_some(), &dir),
        Command::Predict { video, query, .. } => cmd_predict(&cfg, &dir, video, query),
        Command::InspectCandidates { .. } => {
            let mask = CandidateMask::new(cfg.train.n_clips)?;
            write_text(&dir.join("candidates.csv"), &mask.to_csv())?;
            Ok(format!("N={} C={}\n", mask.n(), mask.count()))
        }
        Command::UpperBound { .. } => cmd_upper_bound(&cfg, &dir),
    }
}

fn cmd_train(cfg: &RunConfig, dir: &Path, threads: usize) -> Result<String> {
    let manifest = CorpusManifest::load(require(&cfg.manifest, "manifest")?)?;
    let data = TrainData::from_manifest(&manifest, cfg.train.n_clips)?;
    let resume = match &cfg.checkpoint {
        Some(p) => Some(Checkpoint::load(p, None)?),
        None => None,
    };
    let outcome = train(
        &cfg.train,
        &data,
        TrainOptions {
            out_dir: Some(dir.to_path_buf()),
            threads,
            resume,
            embedding_file: cfg.embedding_file.clone(),
            verbose: true,
        },
    )?;
    Ok(format!(
        "trained {} epochs, best epoch {}; checkpoints in {}\n",
        cfg.train.epochs,
        outcome.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        dir.display()
    ))
}

fn cmd_eval(cfg: &RunConfig, check_hash: bool, dir: &Path) -> Result<String> {
    let ck_path = require(&cfg.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(ck_path, None)?;
    if check_hash {
        let expected = cfg.train.model(cfg.train.d_in.unwrap_or(ck.params.config.d_in));
        if expected.hash() != ck.params.config.hash() {
            return Err(TanError::Checkpoint(format!(
                "{} was trained with a different architecture than the configuration",
                ck_path.display()
            )));
        }
    }
    let manifest = CorpusManifest::load(require(&cfg.manifest, "manifest")?)?.split(cfg.split);
    if manifest.is_empty() {
        return Err(TanError::Eval(format!("no {} annotations in manifest", cfg.split.as_str())));
    }
    let params = ck.params;
    let samples = load_samples(&manifest, &params.vocab, params.config.n_clips)?;
    let rt = Runtime::new(&params.config)?;
    let spec = EvalSpec {
        ns: cfg.top_n.clone(),
        ms: cfg.iou_thresholds.clone(),
        nms_threshold: cfg.train.nms_threshold,
        t_min: cfg.train.t_min,
        t_max: cfg.train.t_max,
    };
    let (report, _) = evaluate(&params, &rt, &samples, &spec)?;
    write_json(&dir.join("eval.json"), &report)?;
    let csv = report.to_csv();
    write_text(&dir.join("eval.csv"), &csv)?;
    Ok(format!(
        "{} queries, C={}, loss {:.6}\n{csv}",
        report.queries,
        report.candidates,
        report.loss.unwrap_or(f64::NAN)
    ))
}

fn cmd_predict(cfg: &RunConfig, dir: &Path, video: &Path, query: &str) -> Result<String> {
    let ck = Checkpoint::load(require(&cfg.checkpoint, "checkpoint")?, None)?;
    let params = ck.params;
    let seq = read_feature_file(video)?;
    let clips = sample_clips(&seq, params.config.n_clips)?;
    let rt = Runtime::new(&params.config)?;
    let n = cfg.top_n.iter().copied().max().unwrap_or(1);
    let (ranked, scores) = predict_top_n(
        &params,
        &rt,
        &clips.features,
        clips.tau,
        query,
        n,
        cfg.train.nms_threshold,
    )?;
    write_text(&dir.join("scores.csv"), &scores.to_csv())?;
    write_json(&dir.join("predictions.json"), &ranked)?;
    Ok(serde_json::to_string_pretty(&ranked).expect("serializable") + "\n")
}

fn cmd_upper_bound(cfg: &RunConfig, dir: &Path) -> Result<String> {
    let manifest = CorpusManifest::load(require(&cfg.manifest, "manifest")?)?;
    if manifest.is_empty() {
        return Err(TanError::Eval("manifest has no annotations".into()));
    }
    let mut gts = Vec::with_capacity(manifest.len());
    for ann in &manifest.annotations {
        let (n, _, tau) = tan2d_core::clips::read_feature_header(&manifest.feature_path(ann))?;
        gts.push(GroundTruth {
            span: ann.span()?,
            duration: n as f64 * tau,
        });
    }
    let mut ns = cfg.upper_bound_clips.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut csv = String::from("n_clips,candidates,m,upper_bound\n");
    let mut prev: Option<Vec<f64>> = None;
    for &n in &ns {
        let mask = CandidateMask::new(n)?;
        let row = upper_bound(&gts, &mask, &cfg.iou_thresholds)?;
        for (&m, &v) in cfg.iou_thresholds.iter().zip(&row) {
            csv.push_str(&format!("{n},{},{m},{v:.4}\n", mask.count()));
        }
        if let Some(p) = &prev {
            if p.iter().zip(&row).any(|(a, b)| b < a) {
                return Err(TanError::Internal(format!("upper bound decreased at N={n}")));
            }
        }
        prev = Some(row);
    }
    write_text(&dir.join("upper_bound.csv"), &csv)?;
    Ok(csv)
}
