//! The full network: parameters, their canonical order, and the forward pass.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clips::project_clip_features;
use crate::error::{Result, TanError};
use crate::numeric::{Linear, LinearVars, Tape, Tensor, Var};
use crate::query::{encode_query, QueryEncoder, QueryEncoderVars, Vocabulary};
use crate::tan::{fuse, score_head, tan_forward, ConvPlan, FusionNorm, FusionParams, FusionVars, TanConvStack};
use crate::temporal_map::{build_map_conv, build_map_pool, CandidateMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapBuilder {
    #[default]
    Pool,
    Conv,
}

/// Architecture hyperparameters. Two checkpoints are compatible exactly when
/// these agree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_clips: usize,
    pub d_in: usize,
    pub d_s: usize,
    pub d_v: usize,
    pub d_o: usize,
    pub layers: usize,
    pub kernel: usize,
    pub map_builder: MapBuilder,
    /// Depth of the kernel-2 stack when `map_builder` is `conv`.
    pub map_conv_depth: usize,
    pub fusion_norm: FusionNorm,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_clips", self.n_clips),
            ("d_in", self.d_in),
            ("d_s", self.d_s),
            ("d_v", self.d_v),
            ("d_o", self.d_o),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(TanError::Config(format!("{name} must be positive")));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(TanError::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.map_builder == MapBuilder::Conv && self.map_conv_depth + 1 > self.n_clips {
            return Err(TanError::Config(format!(
                "map_conv_depth {} too deep for {} clips",
                self.map_conv_depth, self.n_clips
            )));
        }
        Ok(())
    }

    /// First 8 bytes of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("model config serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub encoder: QueryEncoder,
    pub clip_proj: Linear,
    /// Kernel-2 map convolutions, weights `[2·d_v × d_v]`.
    pub map_conv: Vec<Linear>,
    pub fusion: FusionParams,
    pub tan: TanConvStack,
    pub head: Linear,
}

impl ModelParams {
    /// Deterministic initialization from `seed`.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = QueryEncoder::init(vocab.len(), config.d_s, &mut rng);
        let clip_proj = Linear::init(config.d_in, config.d_v, &mut rng);
        let map_conv = match config.map_builder {
            MapBuilder::Pool => Vec::new(),
            MapBuilder::Conv => (0..config.map_conv_depth)
                .map(|_| Linear::init(2 * config.d_v, config.d_v, &mut rng))
                .collect(),
        };
        let mut fusion = FusionParams::init(config.d_s, config.d_v, config.d_o, &mut rng);
        fusion.norm = config.fusion_norm;
        let tan = TanConvStack::init(config.layers, config.kernel, config.d_o, &mut rng)?;
        let head = Linear::init(config.d_o, 1, &mut rng);
        Ok(ModelParams {
            config,
            vocab,
            encoder,
            clip_proj,
            map_conv,
            fusion,
            tan,
            head,
        })
    }

    /// Every trainable tensor with its stable name, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("encoder.embedding".to_string(), &self.encoder.embedding)];
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.lstm{i}.w_input"), &l.w_input));
            out.push((format!("encoder.lstm{i}.w_hidden"), &l.w_hidden));
            out.push((format!("encoder.lstm{i}.bias"), &l.bias));
        }
        out.push(("clip_proj.weight".into(), &self.clip_proj.weight));
        out.push(("clip_proj.bias".into(), &self.clip_proj.bias));
        for (i, l) in self.map_conv.iter().enumerate() {
            out.push((format!("map_conv{i}.weight"), &l.weight));
            out.push((format!("map_conv{i}.bias"), &l.bias));
        }
        out.push(("fusion.sentence".into(), &self.fusion.sentence));
        out.push(("fusion.map".into(), &self.fusion.map));
        for (i, l) in self.tan.layers.iter().enumerate() {
            out.push((format!("tan{i}.weight"), &l.weight));
            out.push((format!("tan{i}.bias"), &l.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.encoder.embedding];
        for l in &mut self.encoder.layers {
            out.extend([&mut l.w_input, &mut l.w_hidden, &mut l.bias]);
        }
        out.extend([&mut self.clip_proj.weight, &mut self.clip_proj.bias]);
        for l in &mut self.map_conv {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out.extend([&mut self.fusion.sentence, &mut self.fusion.map]);
        for l in &mut self.tan.layers {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(tape),
            clip_proj: self.clip_proj.bind(tape),
            map_conv: self
                .map_conv
                .iter()
                .map(|l| {
                    let v = l.bind(tape);
                    (v.weight, v.bias)
                })
                .collect(),
            fusion: self.fusion.bind(tape),
            tan: self.tan.bind(tape),
            head: self.head.bind(tape),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: QueryEncoderVars,
    pub clip_proj: LinearVars,
    pub map_conv: Vec<(Var, Var)>,
    pub fusion: FusionVars,
    pub tan: Vec<LinearVars>,
    pub head: LinearVars,
}

impl ModelVars {
    /// Rebuild the structure from handles in [`ModelParams::named`] order,
    /// e.g. leaves created by a gradient checker.
    pub fn from_ordered(params: &ModelParams, vars: &[Var]) -> Result<Self> {
        let expected = params.named().len();
        if vars.len() != expected {
            return Err(TanError::Internal(format!("{} handles for {expected} tensors", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let encoder = QueryEncoderVars {
            embedding: next(),
            layers: params
                .encoder
                .layers
                .iter()
                .map(|l| crate::query::LstmLayerVars {
                    w_input: next(),
                    w_hidden: next(),
                    bias: next(),
                    hidden: l.hidden(),
                })
                .collect(),
        };
        let clip_proj = LinearVars {
            weight: next(),
            bias: next(),
        };
        let map_conv = params.map_conv.iter().map(|_| (next(), next())).collect();
        let fusion = FusionVars {
            sentence: next(),
            map: next(),
            eps: params.fusion.eps,
            norm: params.fusion.norm,
        };
        let tan = params
            .tan
            .layers
            .iter()
            .map(|_| LinearVars {
                weight: next(),
                bias: next(),
            })
            .collect();
        let head = LinearVars {
            weight: next(),
            bias: next(),
        };
        Ok(ModelVars {
            encoder,
            clip_proj,
            map_conv,
            fusion,
            tan,
            head,
        })
    }

    /// Leaf handles in the order of [`ModelParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.encoder.embedding];
        for l in &self.encoder.layers {
            out.extend([l.w_input, l.w_hidden, l.bias]);
        }
        out.extend([self.clip_proj.weight, self.clip_proj.bias]);
        for &(w, b) in &self.map_conv {
            out.extend([w, b]);
        }
        out.extend([self.fusion.sentence, self.fusion.map]);
        for l in &self.tan {
            out.extend([l.weight, l.bias]);
        }
        out.extend([self.head.weight, self.head.bias]);
        out
    }
}

/// Precomputed mask and convolution plan for one configuration.
#[derive(Clone, Debug)]
pub struct Runtime {
    pub mask: CandidateMask,
    pub plan: Arc<ConvPlan>,
    pub builder: MapBuilder,
}

impl Runtime {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mask = CandidateMask::new(config.n_clips)?;
        let plan = Arc::new(ConvPlan::new(&mask, config.kernel)?);
        Ok(Runtime {
            mask,
            plan,
            builder: config.map_builder,
        })
    }
}

/// Scores for one (query, video) pair as an `[N·N × 1]` column, zero at
/// invalid cells.
pub fn forward(tape: &mut Tape, vars: &ModelVars, rt: &Runtime, tokens: &[usize], clips: &Tensor) -> Result<Var> {
    let n = rt.mask.n();
    if clips.shape().len() != 2 || clips.shape()[0] != n {
        return Err(TanError::Dimension(format!(
            "clip features {:?} for a model with {n} clips",
            clips.shape()
        )));
    }
    let c = tape.leaf(clips);
    forward_with_clips(tape, vars, rt, tokens, c)
}

/// [`forward`] with clip features already on the tape.
pub fn forward_with_clips(tape: &mut Tape, vars: &ModelVars, rt: &Runtime, tokens: &[usize], clips: Var) -> Result<Var> {
    let sentence = encode_query(tape, tokens, &vars.encoder)?;
    let v = project_clip_features(tape, clips, &vars.clip_proj)?;
    let map = match rt.builder {
        MapBuilder::Pool => build_map_pool(tape, v, &rt.mask)?,
        MapBuilder::Conv => build_map_conv(tape, v, &vars.map_conv, &rt.mask)?,
    };
    let fused = fuse(tape, sentence, map, &vars.fusion, &rt.mask)?;
    let h = tan_forward(tape, fused, &vars.tan, &rt.plan)?;
    score_head(tape, h, &vars.head, &rt.mask)
}
