//! Versioned binary snapshots of model parameters and optimizer state.
//!
//! Layout (little-endian): magic, `u32` version, `u64` architecture hash,
//! `u64` length plus JSON metadata, `u32` tensor count, then per tensor a
//! `u32`-prefixed name, `u32` rank, `u64` extents and `f64` values. Optimizer
//! moments follow when present, behind a one-byte flag.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TanError};
use crate::model::{ModelConfig, ModelParams};
use crate::numeric::{AdamHyper, AdamState, Tensor};
use crate::query::Vocabulary;

const MAGIC: &[u8; 8] = b"TAN2DCKP";
const VERSION: u32 = 1;

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Rank1@{0.3,0.5,0.7} then Rank5@{0.3,0.5,0.7}, when evaluated.
    pub ranks: Option<[f64; 6]>,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,rank1@0.3,rank1@0.5,rank1@0.7,rank5@0.3,rank5@0.5,rank5@0.7";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let ranks = match &self.ranks {
            Some(r) => r.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(","),
            None => ",,,,,".to_string(),
        };
        format!("{},{},{:.8},{ranks}", self.epoch, self.split, self.loss)
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub history: Vec<MetricsRow>,
    pub adam: Option<AdamHyper>,
    /// Free-form record of the training configuration.
    pub train: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: CheckpointMeta,
    /// Per-tensor optimizer state, in parameter order.
    pub adam: Option<Vec<AdamState>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TanError::format(self.path, "checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| TanError::format(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.params.config.hash());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(&meta);
        let named = self.params.named();
        put_u32(&mut out, named.len() as u32);
        for (name, t) in &named {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &e in t.shape() {
                put_u64(&mut out, e as u64);
            }
            put_f64s(&mut out, t.data());
        }
        match &self.adam {
            None => out.push(0),
            Some(states) => {
                out.push(1);
                for s in states {
                    put_u64(&mut out, s.t);
                    put_f64s(&mut out, &s.m);
                    put_f64s(&mut out, &s.v);
                }
            }
        }
        out
    }

    /// Parse a checkpoint. When `expected` is given, its architecture hash
    /// must match the stored one.
    pub fn decode(bytes: &[u8], path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(TanError::format(path, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TanError::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hash = r.u64()?;
        if let Some(cfg) = expected {
            if cfg.hash() != hash {
                return Err(TanError::Checkpoint(format!(
                    "{}: architecture hash {hash:016x} does not match configuration {:016x}",
                    path.display(),
                    cfg.hash()
                )));
            }
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| TanError::format(path, format!("metadata: {e}")))?;
        if meta.model.hash() != hash {
            return Err(TanError::Checkpoint(format!("{}: metadata disagrees with stored hash", path.display())));
        }
        let vocab = Vocabulary::from_token_list(meta.vocab.clone())?;
        // Zero seed is fine: every tensor is overwritten below.
        let mut params = ModelParams::init(meta.model.clone(), vocab, 0)?;
        let names: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(TanError::Checkpoint(format!("{count} tensors stored, model has {}", names.len())));
        }
        for ((name, shape), slot) in names.iter().zip(params.tensors_mut()) {
            let len = r.u32()? as usize;
            let stored = String::from_utf8_lossy(r.take(len)?).into_owned();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if &stored != name || &dims != shape {
                return Err(TanError::Checkpoint(format!(
                    "tensor {stored} {dims:?} where {name} {shape:?} was expected"
                )));
            }
            *slot = Tensor::new(dims, r.f64s(shape.iter().product())?)?;
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let hyper = meta.adam.unwrap_or_default();
                let mut states = Vec::with_capacity(names.len());
                for (_, shape) in &names {
                    let n: usize = shape.iter().product();
                    let t = r.u64()?;
                    let m = r.f64s(n)?;
                    let v = r.f64s(n)?;
                    states.push(AdamState { m, v, t, hyper });
                }
                Some(states)
            }
            f => return Err(TanError::format(path, format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(TanError::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { params, meta, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| TanError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| TanError::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TanError::io(path, e))?;
        Self::decode(&bytes, path, expected)
    }
}
