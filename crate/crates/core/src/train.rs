//! Mini-batch training with seeded shuffling, validation-driven selection and
//! resumable checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{metrics_csv, Checkpoint, CheckpointMeta, MetricsRow};
use crate::corpus::{load_samples, CorpusManifest, Sample, Split};
use crate::error::{Result, TanError};
use crate::eval::{bce_loss, evaluate, EvalReport, EvalSpec};
use crate::model::{forward, MapBuilder, ModelConfig, ModelParams, Runtime};
use crate::numeric::{adam_step, AdamHyper, AdamState, Tape};
use crate::query::Vocabulary;
use crate::tan::FusionNorm;
use crate::temporal_map::label_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub t_min: f64,
    pub t_max: f64,
    pub nms_threshold: f64,
    pub n_clips: usize,
    /// Clip feature width; taken from the corpus when absent.
    pub d_in: Option<usize>,
    pub d_s: usize,
    pub d_v: usize,
    pub d_o: usize,
    pub layers: usize,
    pub kernel: usize,
    pub map_builder: MapBuilder,
    pub map_conv_depth: usize,
    pub fusion_norm: FusionNorm,
    pub train_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            epochs: 10,
            seed: 42,
            t_min: 0.5,
            t_max: 1.0,
            nms_threshold: 0.5,
            n_clips: 16,
            d_in: None,
            d_s: 512,
            d_v: 512,
            d_o: 512,
            layers: 8,
            kernel: 5,
            map_builder: MapBuilder::Pool,
            map_conv_depth: 3,
            fusion_norm: FusionNorm::PerPosition,
            train_embeddings: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TanError::Config(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TanError::Config("batch_size must be positive".into()));
        }
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(TanError::Config(format!(
                "need 0 <= t_min < t_max <= 1, got {} and {}",
                self.t_min, self.t_max
            )));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(TanError::Config(format!("nms_threshold must be in (0, 1], got {}", self.nms_threshold)));
        }
        self.model(self.d_in.unwrap_or(1)).validate()
    }

    pub fn model(&self, d_in: usize) -> ModelConfig {
        ModelConfig {
            n_clips: self.n_clips,
            d_in,
            d_s: self.d_s,
            d_v: self.d_v,
            d_o: self.d_o,
            layers: self.layers,
            kernel: self.kernel,
            map_builder: self.map_builder,
            map_conv_depth: if self.map_builder == MapBuilder::Conv { self.map_conv_depth } else { 0 },
            fusion_norm: self.fusion_norm,
        }
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            nms_threshold: self.nms_threshold,
            t_min: self.t_min,
            t_max: self.t_max,
            ..EvalSpec::default()
        }
    }
}

/// Training and validation samples sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainData {
    /// Vocabulary from the training queries; both splits resampled to `n` clips.
    pub fn from_manifest(manifest: &CorpusManifest, n: usize) -> Result<Self> {
        let train_m = manifest.split(Split::Train);
        if train_m.is_empty() {
            return Err(TanError::Data("manifest has no training annotations".into()));
        }
        let vocab = Vocabulary::from_texts(train_m.annotations.iter().map(|a| a.query.as_str()));
        Ok(TrainData {
            train: load_samples(&train_m, &vocab, n)?,
            val: load_samples(&manifest.split(Split::Val), &vocab, n)?,
            vocab,
        })
    }

    pub fn d_in(&self) -> Result<usize> {
        self.train
            .first()
            .map(|s| s.clips.features.cols())
            .ok_or_else(|| TanError::Data("no training samples".into()))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `last.ckpt`, `best.ckpt` and `metrics.csv` go.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for per-sample gradients; 0 means one.
    pub threads: usize,
    pub resume: Option<Checkpoint>,
    pub embedding_file: Option<PathBuf>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Parameters of the epoch with the best validation Rank1@0.5.
    pub best: ModelParams,
    pub best_epoch: Option<usize>,
    pub history: Vec<MetricsRow>,
    pub last_report: Option<EvalReport>,
}

/// Loss and per-tensor gradients for one sample.
pub fn sample_gradients(params: &ModelParams, rt: &Runtime, sample: &Sample, t_min: f64, t_max: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let p = forward(&mut tape, &vars, rt, &sample.tokens, &sample.clips.features)?;
    let valid = tape.gather_rows(p, rt.mask.valid_rows())?;
    let labels = label_map(sample.gt_span, &rt.mask, t_min, t_max)?;
    let loss = bce_loss(&mut tape, valid, &labels.valid_targets(&rt.mask))?;
    let value = tape.scalar_value(loss);
    let grads = tape.backward(loss)?;
    let per_tensor = vars
        .ordered()
        .into_iter()
        .map(|v| grads.get_or_zeros(v, tape.value(v).len()))
        .collect();
    Ok((value, per_tensor))
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn norms_summary(params: &ModelParams) -> String {
    params
        .named()
        .iter()
        .map(|(n, t)| format!("{n}={:.4e}", t.l2_norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn ranks_of(report: &EvalReport) -> [f64; 6] {
    let mut out = [0.0; 6];
    for (i, (n, m)) in [(1, 0.3), (1, 0.5), (1, 0.7), (5, 0.3), (5, 0.5), (5, 0.7)].into_iter().enumerate() {
        out[i] = report.get(n, m).unwrap_or(f64::NAN);
    }
    out
}

/// Run (or continue) training. Results are identical for any thread count
/// since per-sample gradients are reduced in sample order.
pub fn train(cfg: &TrainConfig, data: &TrainData, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TanError::Data("no training samples".into()));
    }
    let d_in = cfg.d_in.unwrap_or(data.d_in()?);
    if data.train.iter().chain(&data.val).any(|s| s.clips.features.cols() != d_in) {
        return Err(TanError::Config(format!("clip features do not all have {d_in} channels")));
    }
    let model_cfg = cfg.model(d_in);
    let rt = Runtime::new(&model_cfg)?;
    let hyper = AdamHyper::with_lr(cfg.lr);
    let spec = cfg.eval_spec();
    let train_json = serde_json::to_value(cfg).expect("config serializes");

    let (mut params, mut adam, start_epoch, mut history, mut best_epoch, mut best_score) = match opts.resume {
        Some(ck) => {
            if ck.params.config.hash() != model_cfg.hash() {
                return Err(TanError::Checkpoint("checkpoint architecture differs from configuration".into()));
            }
            if ck.params.vocab != data.vocab {
                return Err(TanError::Checkpoint("checkpoint vocabulary differs from corpus".into()));
            }
            let adam = match ck.adam {
                Some(mut a) => {
                    a.iter_mut().for_each(|s| s.hyper = hyper);
                    a
                }
                None => ck.params.named().iter().map(|(_, t)| AdamState::new(t.numel(), hyper)).collect(),
            };
            (ck.params, adam, ck.meta.epoch, ck.meta.history, ck.meta.best_epoch, ck.meta.best_score)
        }
        None => {
            let mut p = ModelParams::init(model_cfg.clone(), data.vocab.clone(), cfg.seed)?;
            if let Some(path) = &opts.embedding_file {
                p.encoder.load_pretrained_embeddings(path, &data.vocab)?;
            }
            let a = p.named().iter().map(|(_, t)| AdamState::new(t.numel(), hyper)).collect();
            (p, a, 0, Vec::new(), None, None)
        }
    };
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut best = match (&opts.out_dir, best_epoch) {
        (Some(dir), Some(_)) if dir.join("best.ckpt").exists() => Checkpoint::load(&dir.join("best.ckpt"), Some(&model_cfg))?.params,
        _ => params.clone(),
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| TanError::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| TanError::Internal(format!("thread pool: {e}")))?;

    let mut last_report = None;
    for epoch in start_epoch + 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch)));
        let mut loss_sum = 0.0;
        for (batch_id, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| sample_gradients(&params, &rt, &data.train[i], cfg.t_min, cfg.t_max))
                    .collect()
            });
            let mut total: Option<Vec<Vec<f64>>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                match &mut total {
                    None => total = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(TanError::Numerical(format!(
                    "non-finite loss at epoch {epoch} batch {batch_id}; parameter norms: {}",
                    norms_summary(&params)
                )));
            }
            loss_sum += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            let total = total.expect("batches are non-empty");
            for (((name, tensor), grad), state) in names.iter().zip(params.tensors_mut()).zip(total).zip(&mut adam) {
                if !cfg.train_embeddings && name == "encoder.embedding" {
                    continue;
                }
                let grad: Vec<f64> = grad.into_iter().map(|g| g * scale).collect();
                adam_step(tensor, &grad, state, name)?;
            }
        }
        let train_loss = loss_sum / data.train.len() as f64;
        history.push(MetricsRow {
            epoch,
            split: Split::Train.as_str().into(),
            loss: train_loss,
            ranks: None,
        });
        if !data.val.is_empty() {
            let (report, _) = evaluate(&params, &rt, &data.val, &spec)?;
            let ranks = ranks_of(&report);
            history.push(MetricsRow {
                epoch,
                split: Split::Val.as_str().into(),
                loss: report.loss.unwrap_or(f64::NAN),
                ranks: Some(ranks),
            });
            if best_score.is_none_or(|b| ranks[1] > b) {
                best_score = Some(ranks[1]);
                best_epoch = Some(epoch);
                best = params.clone();
            }
            last_report = Some(report);
        } else {
            best_epoch = Some(epoch);
            best = params.clone();
        }
        if opts.verbose {
            let val = history
                .last()
                .and_then(|r| r.ranks)
                .map(|r| format!(" val R1@0.5={:.2} R1@0.7={:.2}", r[1], r[2]))
                .unwrap_or_default();
            eprintln!(
                "epoch {epoch}/{}: train loss {train_loss:.5}{val} ({:.1}s)",
                cfg.epochs,
                started.elapsed().as_secs_f64()
            );
        }
        if let Some(dir) = &opts.out_dir {
            let meta = CheckpointMeta {
                model: model_cfg.clone(),
                vocab: data.vocab.tokens().to_vec(),
                epoch,
                best_epoch,
                best_score,
                history: history.clone(),
                adam: Some(hyper),
                train: train_json.clone(),
            };
            let ck = Checkpoint {
                params: params.clone(),
                meta,
                adam: Some(adam.clone()),
            };
            ck.save(&dir.join("last.ckpt"))?;
            if best_epoch == Some(epoch) {
                ck.save(&dir.join("best.ckpt"))?;
            }
            write_metrics(&dir.join("metrics.csv"), &history)?;
        }
    }
    Ok(TrainOutcome {
        params,
        best,
        best_epoch,
        history,
        last_report,
    })
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| TanError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_corpus, GeneratorConfig};

    fn tiny_data(videos: usize) -> TrainData {
        let gen = GeneratorConfig {
            n_videos: videos,
            d_in: 12,
            ..GeneratorConfig::default()
        };
        let corpus = generate_synthetic_corpus(&gen).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write(dir.path()).unwrap();
        let manifest = CorpusManifest::load(&dir.path().join("manifest.jsonl")).unwrap();
        TrainData::from_manifest(&manifest, 8).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            epochs: 2,
            n_clips: 8,
            d_s: 6,
            d_v: 6,
            d_o: 6,
            layers: 2,
            kernel: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut data = tiny_data(6);
        data.train.truncate(1);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            ..tiny_config()
        };
        let init = ModelParams::init(cfg.model(12), data.vocab.clone(), cfg.seed).unwrap();
        let out = train(&cfg, &data, TrainOptions::default()).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.history[0].split, "train");
        assert!(out.history[0].loss.is_finite());
    }

    #[test]
    fn overfits_single_sample() {
        let data = tiny_data(4);
        let cfg = TrainConfig {
            lr: 1e-3,
            ..tiny_config()
        };
        let sample = &data.train[0];
        let mut params = ModelParams::init(cfg.model(12), data.vocab.clone(), 1).unwrap();
        let rt = Runtime::new(&params.config).unwrap();
        let mut adam: Vec<AdamState> = params
            .named()
            .iter()
            .map(|(_, t)| AdamState::new(t.numel(), AdamHyper::with_lr(cfg.lr)))
            .collect();
        let mut losses = Vec::new();
        for _ in 0..50 {
            let (l, g) = sample_gradients(&params, &rt, sample, cfg.t_min, cfg.t_max).unwrap();
            losses.push(l);
            for ((t, g), s) in params.tensors_mut().into_iter().zip(g).zip(&mut adam) {
                adam_step(t, &g, s, "p").unwrap();
            }
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let data = tiny_data(8);
        let cfg = tiny_config();
        let a = train(&cfg, &data, TrainOptions::default()).unwrap();
        let b = train(&cfg, &data, TrainOptions::default()).unwrap();
        let c = train(
            &cfg,
            &data,
            TrainOptions {
                threads: 3,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
        assert_eq!(a.params, b.params);
        for (x, y) in a.history.iter().zip(&c.history) {
            assert!((x.loss - y.loss).abs() <= 1e-9);
        }
    }

    #[test]
    fn resume_continues_epoch_count() {
        let data = tiny_data(8);
        let dir = tempfile::tempdir().unwrap();
        let full = train(&tiny_config(), &data, TrainOptions::default()).unwrap();

        let first = TrainConfig {
            epochs: 1,
            ..tiny_config()
        };
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        train(&first, &data, opts.clone()).unwrap();
        let ck = Checkpoint::load(&dir.path().join("last.ckpt"), None).unwrap();
        assert_eq!(ck.meta.epoch, 1);
        let resumed = train(
            &tiny_config(),
            &data,
            TrainOptions {
                resume: Some(ck),
                ..opts
            },
        )
        .unwrap();
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.params, full.params);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv, metrics_csv(&full.history));
        assert!(dir.path().join("best.ckpt").exists());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TrainConfig { lr: -1.0, ..tiny_config() },
            TrainConfig { t_min: 0.7, t_max: 0.5, ..tiny_config() },
            TrainConfig { nms_threshold: 0.0, ..tiny_config() },
            TrainConfig { kernel: 4, ..tiny_config() },
            TrainConfig { batch_size: 0, ..tiny_config() },
        ] {
            assert!(matches!(cfg.validate(), Err(TanError::Config(_))), "{cfg:?}");
        }
        let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }
}
