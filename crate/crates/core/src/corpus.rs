//! Annotation manifests and in-memory datasets.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clips::{read_feature_file, read_feature_header, sample_clips, SampledClips};
use crate::error::{Result, TanError};
use crate::query::{tokenize, Vocabulary};
use crate::temporal_map::{seconds_to_span, MomentSpan, TimeSpan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub video_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_path: String,
    pub query: String,
    pub start_sec: f64,
    pub end_sec: f64,
    pub split: Split,
}

impl Annotation {
    pub fn span(&self) -> Result<TimeSpan> {
        TimeSpan::new(self.start_sec, self.end_sec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub annotations: Vec<Annotation>,
}

impl CorpusManifest {
    pub fn feature_path(&self, ann: &Annotation) -> PathBuf {
        let p = Path::new(&ann.feature_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> CorpusManifest {
        CorpusManifest {
            root: self.root.clone(),
            annotations: self.annotations.iter().filter(|a| a.split == split).cloned().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    /// JSON-lines text of the annotations.
    pub fn to_jsonl(&self) -> String {
        self.annotations
            .iter()
            .map(|a| serde_json::to_string(a).expect("annotation serializes") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| TanError::io(path, e))
    }

    /// Parse a manifest and check every annotation against its feature file header.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| TanError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut annotations = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| TanError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ann: Annotation = serde_json::from_str(&line)
                .map_err(|e| TanError::format(path, format!("line {}: {e}", i + 1)))?;
            annotations.push(ann);
        }
        let manifest = CorpusManifest { root, annotations };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        let mut durations: BTreeMap<PathBuf, f64> = BTreeMap::new();
        for ann in &self.annotations {
            let fp = self.feature_path(ann);
            let duration = match durations.get(&fp) {
                Some(&d) => d,
                None => {
                    if !fp.exists() {
                        return Err(TanError::Data(format!(
                            "feature file {} for video {} is missing",
                            fp.display(),
                            ann.video_id
                        )));
                    }
                    let (n, _, tau) = read_feature_header(&fp)?;
                    let d = n as f64 * tau;
                    durations.insert(fp.clone(), d);
                    d
                }
            };
            let span = ann.span()?;
            if span.end > duration * (1.0 + 1e-9) {
                return Err(TanError::Annotation(format!(
                    "{}: moment ends at {} beyond video duration {duration}",
                    ann.video_id, span.end
                )));
            }
        }
        Ok(())
    }
}

/// An annotation with its video resampled to the model's clip count.
#[derive(Clone, Debug)]
pub struct Sample {
    pub video_id: String,
    pub query: String,
    pub tokens: Vec<usize>,
    pub clips: SampledClips,
    /// Ground truth in seconds.
    pub gt: TimeSpan,
    /// Ground truth on the sampled clip grid.
    pub gt_span: MomentSpan,
}

impl Sample {
    pub fn duration(&self) -> f64 {
        self.clips.tau * self.clips.n() as f64
    }
}

/// Load every annotation of a manifest, reading each feature file once.
pub fn load_samples(manifest: &CorpusManifest, vocab: &Vocabulary, n: usize) -> Result<Vec<Sample>> {
    let mut cache: BTreeMap<PathBuf, SampledClips> = BTreeMap::new();
    let mut out = Vec::with_capacity(manifest.len());
    for ann in &manifest.annotations {
        let fp = manifest.feature_path(ann);
        if !cache.contains_key(&fp) {
            let seq = read_feature_file(&fp)?;
            cache.insert(fp.clone(), sample_clips(&seq, n)?);
        }
        let clips = cache[&fp].clone();
        let gt = ann.span()?;
        let gt_span = seconds_to_span(gt.start, gt.end, clips.tau, n)?;
        let tokens = tokenize(&ann.query, vocab);
        if tokens.is_empty() {
            return Err(TanError::Query(format!("empty query for video {}", ann.video_id)));
        }
        out.push(Sample {
            video_id: ann.video_id.clone(),
            query: ann.query.clone(),
            tokens,
            clips,
            gt,
            gt_span,
        });
    }
    Ok(out)
}
