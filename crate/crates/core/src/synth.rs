//! Synthetic corpus with planted activities and ordinal queries.
//!
//! Each video is background noise with one to three planted activity
//! segments. Every activity owns a fixed direction in feature space. Segment
//! boundaries sit on a coarse grid of `grid` units per video, occasionally
//! nudged by one raw clip so that clip quantization is not always exact.
//! When an activity occurs twice, the video yields a "first" and an "again"
//! query, which a model can only answer by looking at neighboring moments.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clips::{write_feature_file, ClipFeatureSequence};
use crate::corpus::{Annotation, CorpusManifest, Split};
use crate::error::{Result, TanError};
use crate::numeric::Tensor;

pub const DEFAULT_ACTIVITIES: [&str; 8] = [
    "plays the saxophone",
    "opens the door",
    "pours a glass of water",
    "jumps rope",
    "reads a book",
    "waves both hands",
    "sweeps the floor",
    "rides a bicycle",
];

const SUBJECTS: [&str; 4] = ["the person", "a man", "a woman", "someone"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_videos: usize,
    /// Raw clip count range per video; counts are multiples of `grid`.
    pub min_clips: usize,
    pub max_clips: usize,
    pub d_in: usize,
    /// Activity boundaries snap to `grid` equal units of the video.
    pub grid: usize,
    /// Chance that a boundary is moved by one raw clip off the grid.
    pub jitter_prob: f64,
    /// Seconds per raw clip.
    pub clip_seconds: f64,
    pub noise: f64,
    /// Chance that a multi-segment video repeats one activity.
    pub repeat_prob: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub activities: Vec<String>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 42,
            n_videos: 1000,
            min_clips: 32,
            max_clips: 64,
            d_in: 32,
            grid: 16,
            jitter_prob: 0.1,
            clip_seconds: 0.5,
            noise: 0.25,
            repeat_prob: 0.6,
            train_fraction: 0.7,
            val_fraction: 0.15,
            activities: DEFAULT_ACTIVITIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl GeneratorConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negated form also rejects NaN
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TanError::Config(m));
        if self.n_videos == 0 {
            return bad("n_videos must be at least 1".into());
        }
        if self.grid < 8 {
            return bad(format!("grid must be at least 8 units, got {}", self.grid));
        }
        if self.min_clips > self.max_clips || self.max_clips / self.grid < self.min_clips.div_ceil(self.grid).max(1) {
            return bad(format!(
                "clip range {}..={} holds no multiple of grid {}",
                self.min_clips, self.max_clips, self.grid
            ));
        }
        if self.activities.len() < 3 {
            return bad("need at least three activities".into());
        }
        if self.d_in < self.activities.len() + 1 {
            return bad(format!("d_in {} too small for {} activities", self.d_in, self.activities.len()));
        }
        if !(self.clip_seconds > 0.0) || !(self.noise >= 0.0) {
            return bad("clip_seconds must be positive and noise non-negative".into());
        }
        for (name, p) in [
            ("jitter_prob", self.jitter_prob),
            ("repeat_prob", self.repeat_prob),
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.train_fraction + self.val_fraction > 1.0 {
            return bad("train_fraction + val_fraction exceeds 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ordinal {
    None,
    First,
    Again,
}

/// Classify a query by its ordinal wording.
pub fn query_ordinal(query: &str) -> Ordinal {
    let words = crate::query::split_words(query);
    if words.iter().any(|w| w == "again" || w == "second") {
        Ordinal::Again
    } else if words.iter().any(|w| w == "first") {
        Ordinal::First
    } else {
        Ordinal::None
    }
}

/// One planted segment in raw clip units, `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub activity: usize,
    pub start: usize,
    pub end: usize,
}

/// Generated corpus held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: GeneratorConfig,
    pub videos: Vec<ClipFeatureSequence>,
    /// Planted segments per video, in temporal order.
    pub planted: Vec<Vec<Segment>>,
    pub manifest: CorpusManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub seed: u64,
    pub videos: usize,
    pub queries: usize,
    pub per_split: Vec<(String, usize)>,
    pub ordinal_queries: usize,
}

impl SyntheticCorpus {
    pub fn report(&self) -> GenerationReport {
        GenerationReport {
            seed: self.config.seed,
            videos: self.videos.len(),
            queries: self.manifest.len(),
            per_split: Split::ALL
                .iter()
                .map(|s| (s.as_str().to_string(), self.manifest.split(*s).len()))
                .collect(),
            ordinal_queries: self
                .manifest
                .annotations
                .iter()
                .filter(|a| query_ordinal(&a.query) != Ordinal::None)
                .count(),
        }
    }

    /// Write `features/*.bin`, `manifest.jsonl`, one manifest per split and `report.json`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let feat_dir = out_dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| TanError::io(&feat_dir, e))?;
        for v in &self.videos {
            write_feature_file(&feat_dir.join(format!("{}.bin", v.video_id)), v)?;
        }
        let manifest = CorpusManifest {
            root: out_dir.to_path_buf(),
            annotations: self.manifest.annotations.clone(),
        };
        manifest.write(&out_dir.join("manifest.jsonl"))?;
        for s in Split::ALL {
            manifest.split(s).write(&out_dir.join(format!("{}.jsonl", s.as_str())))?;
        }
        let report = serde_json::to_string_pretty(&self.report()).expect("report serializes");
        let rp = out_dir.join("report.json");
        fs::write(&rp, report + "\n").map_err(|e| TanError::io(&rp, e))
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Lengths and gaps in grid units, laid out inside `grid` units.
fn layout_units(rng: &mut ChaCha8Rng, grid: usize, count: usize) -> Vec<(usize, usize)> {
    let max_len = (grid / 4).max(2);
    loop {
        let lens: Vec<usize> = (0..count).map(|_| rng.random_range(2..=max_len)).collect();
        let gaps: Vec<usize> = (1..count).map(|_| rng.random_range(1..=3)).collect();
        let total: usize = lens.iter().sum::<usize>() + gaps.iter().sum::<usize>();
        if total > grid {
            continue;
        }
        let mut pos = rng.random_range(0..=grid - total);
        let mut out = Vec::with_capacity(count);
        for (i, &len) in lens.iter().enumerate() {
            out.push((pos, pos + len));
            pos += len + gaps.get(i).copied().unwrap_or(0);
        }
        return out;
    }
}

fn assign_activities(rng: &mut ChaCha8Rng, count: usize, n_activities: usize, repeat: bool) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n_activities).collect();
    pool.shuffle(rng);
    if !repeat {
        return pool[..count].to_vec();
    }
    // One adjacent pair shares an activity; everything else is distinct.
    let pair_at = rng.random_range(0..count - 1);
    let mut out = Vec::with_capacity(count);
    let mut next = 1;
    for i in 0..count {
        if i == pair_at || i == pair_at + 1 {
            out.push(pool[0]);
        } else {
            out.push(pool[next]);
            next += 1;
        }
    }
    out
}

fn jitter(rng: &mut ChaCha8Rng, segs: &mut [Segment], prob: f64, n_clips: usize, per_unit: usize) {
    if per_unit < 2 {
        return;
    }
    for i in 0..segs.len() {
        let lo_limit = if i == 0 { 0 } else { segs[i - 1].end + 1 };
        let hi_limit = if i + 1 == segs.len() { n_clips } else { segs[i + 1].start - 1 };
        if rng.random_bool(prob) {
            let s = segs[i].start;
            let cand = if rng.random_bool(0.5) { s + 1 } else { s.wrapping_sub(1) };
            if cand >= lo_limit && cand < n_clips && cand + per_unit <= segs[i].end {
                segs[i].start = cand;
            }
        }
        if rng.random_bool(prob) {
            let e = segs[i].end;
            let cand = if rng.random_bool(0.5) { e + 1 } else { e - 1 };
            if cand <= hi_limit && cand >= segs[i].start + per_unit {
                segs[i].end = cand;
            }
        }
    }
}

fn render(
    rng: &mut ChaCha8Rng,
    cfg: &GeneratorConfig,
    n_clips: usize,
    segs: &[Segment],
    directions: &[Vec<f64>],
    background: &[f64],
) -> Vec<f64> {
    let d = cfg.d_in;
    let scene: Vec<f64> = unit_vector(rng, d).into_iter().map(|v| 0.3 * v).collect();
    let mut data = Vec::with_capacity(n_clips * d);
    for c in 0..n_clips {
        let base: &[f64] = segs
            .iter()
            .find(|s| s.start <= c && c < s.end)
            .map_or(background, |s| &directions[s.activity]);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            let v = base[j] + scene[j] + cfg.noise * z;
            // Values are stored as f32 on disk; round here so memory and file agree.
            data.push(v as f32 as f64);
        }
    }
    data
}

/// Mean projection onto `dir` inside `[start, end)` minus the mean outside.
fn planted_margin(data: &[f64], d: usize, dir: &[f64], start: usize, end: usize) -> f64 {
    let n = data.len() / d;
    let (mut inside, mut outside) = (0.0, 0.0);
    for c in 0..n {
        let p: f64 = data[c * d..(c + 1) * d].iter().zip(dir).map(|(a, b)| a * b).sum();
        if (start..end).contains(&c) {
            inside += p;
        } else {
            outside += p;
        }
    }
    let n_in = (end - start) as f64;
    let n_out = (n - (end - start)) as f64;
    inside / n_in - if n_out > 0.0 { outside / n_out } else { f64::NEG_INFINITY }
}

pub fn generate_synthetic_corpus(cfg: &GeneratorConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let directions: Vec<Vec<f64>> = (0..cfg.activities.len()).map(|_| unit_vector(&mut rng, cfg.d_in)).collect();
    let background = unit_vector(&mut rng, cfg.d_in);

    let mut order: Vec<usize> = (0..cfg.n_videos).collect();
    order.shuffle(&mut rng);
    let n_train = (cfg.n_videos as f64 * cfg.train_fraction).round() as usize;
    let n_val = (cfg.n_videos as f64 * cfg.val_fraction).round() as usize;
    let mut splits = vec![Split::Test; cfg.n_videos];
    for (rank, &v) in order.iter().enumerate() {
        splits[v] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let r_lo = cfg.min_clips.div_ceil(cfg.grid).max(1);
    let r_hi = cfg.max_clips / cfg.grid;
    let width = cfg.n_videos.to_string().len().max(5);
    let mut videos = Vec::with_capacity(cfg.n_videos);
    let mut planted = Vec::with_capacity(cfg.n_videos);
    let mut annotations = Vec::new();
    for (v, &split) in splits.iter().enumerate() {
        let video_id = format!("vid{v:0width$}");
        let per_unit = rng.random_range(r_lo..=r_hi);
        let n_clips = per_unit * cfg.grid;
        let count = rng.random_range(1..=3usize);
        let repeat = count >= 2 && rng.random_bool(cfg.repeat_prob);

        let (segs, data) = loop {
            let units = layout_units(&mut rng, cfg.grid, count);
            let acts = assign_activities(&mut rng, count, cfg.activities.len(), repeat);
            let mut segs: Vec<Segment> = units
                .iter()
                .zip(&acts)
                .map(|(&(s, e), &a)| Segment {
                    activity: a,
                    start: s * per_unit,
                    end: e * per_unit,
                })
                .collect();
            jitter(&mut rng, &mut segs, cfg.jitter_prob, n_clips, per_unit);
            let data = render(&mut rng, cfg, n_clips, &segs, &directions, &background);
            let ok = segs
                .iter()
                .all(|s| planted_margin(&data, cfg.d_in, &directions[s.activity], s.start, s.end) > 0.0);
            if ok {
                break (segs, data);
            }
        };

        let feature_path = format!("features/{video_id}.bin");
        let mut push = |seg: &Segment, query: String| {
            annotations.push(Annotation {
                video_id: video_id.clone(),
                feature_path: feature_path.clone(),
                query,
                start_sec: seg.start as f64 * cfg.clip_seconds,
                end_sec: seg.end as f64 * cfg.clip_seconds,
                split,
            });
        };
        let mut seen = vec![false; cfg.activities.len()];
        for seg in &segs {
            if seen[seg.activity] {
                continue;
            }
            seen[seg.activity] = true;
            let occurrences: Vec<&Segment> = segs.iter().filter(|s| s.activity == seg.activity).collect();
            let phrase = &cfg.activities[seg.activity];
            let subject = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
            if occurrences.len() == 1 {
                push(seg, format!("{subject} {phrase}"));
            } else {
                let first = if rng.random_bool(0.5) {
                    format!("{subject} {phrase} first")
                } else {
                    format!("{subject} {phrase} for the first time")
                };
                push(occurrences[0], first);
                let subject = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
                let again = if rng.random_bool(0.5) {
                    format!("{subject} {phrase} again")
                } else {
                    format!("{subject} {phrase} a second time")
                };
                push(occurrences[1], again);
            }
        }
        videos.push(ClipFeatureSequence::new(
            video_id.clone(),
            Tensor::new(vec![n_clips, cfg.d_in], data)?,
            cfg.clip_seconds,
        )?);
        planted.push(segs);
    }

    Ok(SyntheticCorpus {
        config: cfg.clone(),
        videos,
        planted,
        manifest: CorpusManifest {
            root: Default::default(),
            annotations,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clips::encode_feature_file;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            seed,
            n_videos: 60,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic_corpus(&small(5)).unwrap();
        let b = generate_synthetic_corpus(&small(5)).unwrap();
        assert_eq!(a.manifest.to_jsonl(), b.manifest.to_jsonl());
        for (x, y) in a.videos.iter().zip(&b.videos) {
            assert_eq!(encode_feature_file(x), encode_feature_file(y));
        }
        let c = generate_synthetic_corpus(&small(6)).unwrap();
        assert_ne!(a.manifest.to_jsonl(), c.manifest.to_jsonl());
    }

    #[test]
    fn zero_videos_rejected() {
        let cfg = GeneratorConfig {
            n_videos: 0,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic_corpus(&cfg), Err(TanError::Config(_))));
    }

    fn direction_index(cfg: &GeneratorConfig, query: &str) -> usize {
        cfg.activities.iter().position(|p| query.contains(p.as_str())).unwrap()
    }

    #[test]
    fn ground_truth_matches_named_occurrence() {
        let corpus = generate_synthetic_corpus(&small(7)).unwrap();
        let cfg = &corpus.config;
        let mut again = 0;
        for ann in &corpus.manifest.annotations {
            let v = corpus.videos.iter().position(|v| v.video_id == ann.video_id).unwrap();
            let act = direction_index(cfg, &ann.query);
            let runs: Vec<(f64, f64)> = corpus.planted[v]
                .iter()
                .filter(|s| s.activity == act)
                .map(|s| (s.start as f64 * cfg.clip_seconds, s.end as f64 * cfg.clip_seconds))
                .collect();
            let gt = (ann.start_sec, ann.end_sec);
            match query_ordinal(&ann.query) {
                Ordinal::None => assert_eq!(runs, vec![gt], "{ann:?}"),
                Ordinal::First => {
                    assert!(runs.len() >= 2);
                    assert_eq!(runs[0], gt);
                }
                Ordinal::Again => {
                    assert!(runs.len() >= 2, "{ann:?}");
                    assert_eq!(runs[1], gt);
                    again += 1;
                }
            }
        }
        assert!(again > 0);
    }

    #[test]
    fn planted_segments_are_ordered_and_disjoint() {
        let corpus = generate_synthetic_corpus(&small(11)).unwrap();
        for (video, segs) in corpus.videos.iter().zip(&corpus.planted) {
            assert!((1..=3).contains(&segs.len()));
            for w in segs.windows(2) {
                assert!(w[0].end < w[1].start);
            }
            assert!(segs.last().unwrap().end <= video.n_clips());
        }
    }

    #[test]
    fn planted_direction_dominates_inside_ground_truth() {
        let corpus = generate_synthetic_corpus(&small(8)).unwrap();
        let cfg = &corpus.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dirs: Vec<Vec<f64>> = (0..cfg.activities.len()).map(|_| unit_vector(&mut rng, cfg.d_in)).collect();
        for ann in &corpus.manifest.annotations {
            let video = corpus.videos.iter().find(|v| v.video_id == ann.video_id).unwrap();
            let s = (ann.start_sec / cfg.clip_seconds).round() as usize;
            let e = (ann.end_sec / cfg.clip_seconds).round() as usize;
            let m = planted_margin(video.features.data(), cfg.d_in, &dirs[direction_index(cfg, &ann.query)], s, e);
            assert!(m > 0.0);
        }
    }

    #[test]
    fn annotations_lie_inside_videos() {
        let corpus = generate_synthetic_corpus(&small(9)).unwrap();
        for ann in &corpus.manifest.annotations {
            let video = corpus.videos.iter().find(|v| v.video_id == ann.video_id).unwrap();
            assert!(0.0 <= ann.start_sec && ann.start_sec < ann.end_sec);
            assert!(ann.end_sec <= video.duration());
        }
    }

    #[test]
    fn written_corpus_loads_back() {
        let corpus = generate_synthetic_corpus(&small(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write(dir.path()).unwrap();
        let m = CorpusManifest::load(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m.len(), corpus.manifest.len());
        let total: usize = Split::ALL
            .iter()
            .map(|s| CorpusManifest::load(&dir.path().join(format!("{}.jsonl", s.as_str()))).unwrap().len())
            .sum();
        assert_eq!(total, m.len());
    }

    #[test]
    fn ordinal_classification() {
        assert_eq!(query_ordinal("a man jumps rope again"), Ordinal::Again);
        assert_eq!(query_ordinal("a man jumps rope a second time"), Ordinal::Again);
        assert_eq!(query_ordinal("a man jumps rope for the first time"), Ordinal::First);
        assert_eq!(query_ordinal("a man jumps rope"), Ordinal::None);
    }
}
