use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tan2d_core::corpus::Split;
use tan2d_core::synth::GeneratorConfig;
use tan2d_core::train::TrainConfig;
use tan2d_core::{Result, TanError};

/// Everything a run needs. Loaded from JSON, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub embedding_file: Option<PathBuf>,
    /// Split scored by `eval`.
    pub split: Split,
    pub top_n: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
    /// Resolutions compared by `upper-bound`.
    pub upper_bound_clips: Vec<usize>,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            out: None,
            checkpoint: None,
            embedding_file: None,
            split: Split::Test,
            top_n: vec![1, 5],
            iou_thresholds: vec![0.3, 0.5, 0.7],
            upper_bound_clips: vec![16, 32, 64],
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a config file. A `run.json` written by an earlier run is also
    /// accepted; its `config` member is used. Relative paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TanError::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| TanError::Config(format!("{}: {e}", path.display())))?;
        let value = match value {
            serde_json::Value::Object(mut map) if map.contains_key("command") && map.contains_key("config") => {
                map.remove("config").expect("checked above")
            }
            v => v,
        };
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| TanError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.out, &mut cfg.checkpoint, &mut cfg.embedding_file]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        if self.top_n.is_empty() || self.top_n.contains(&0) {
            return Err(TanError::Config("top_n entries must be at least 1".into()));
        }
        if self.iou_thresholds.is_empty() || self.iou_thresholds.iter().any(|&m| !(m > 0.0 && m < 1.0)) {
            return Err(TanError::Config("iou_thresholds must lie in (0, 1)".into()));
        }
        if self.upper_bound_clips.contains(&0) {
            return Err(TanError::Config("upper_bound_clips entries must be positive".into()));
        }
        for p in [&self.manifest, &self.checkpoint, &self.embedding_file].into_iter().flatten() {
            if !p.exists() {
                return Err(TanError::Data(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

pub fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| TanError::Config(format!("--{flag}: cannot parse {s:?}")))
        })
        .collect()
}
