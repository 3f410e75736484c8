//! Deterministic fixtures shared by the benchmarks in `benches/`.

use tan2d_core::clips::SampledClips;
use tan2d_core::corpus::Sample;
use tan2d_core::model::{MapBuilder, ModelConfig, ModelParams};
use tan2d_core::numeric::Tensor;
use tan2d_core::query::{tokenize, Vocabulary};
use tan2d_core::tan::FusionNorm;
use tan2d_core::temporal_map::{MomentSpan, TimeSpan};

/// Smooth pseudo-random values without an RNG dependency.
pub fn filled(shape: Vec<usize>, phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 + phase) * 0.618_033_988_7).sin() * 0.5).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// The reduced configuration used for synthetic experiments.
pub fn reduced_config(n_clips: usize, d_in: usize) -> ModelConfig {
    ModelConfig {
        n_clips,
        d_in,
        d_s: 64,
        d_v: 64,
        d_o: 64,
        layers: 4,
        kernel: 5,
        map_builder: MapBuilder::Pool,
        map_conv_depth: 0,
        fusion_norm: FusionNorm::PerPosition,
    }
}

pub fn model(config: ModelConfig) -> ModelParams {
    let vocab = Vocabulary::from_texts(["the person opens the door again"]);
    ModelParams::init(config, vocab, 7).expect("valid config")
}

pub fn sample(params: &ModelParams) -> Sample {
    let n = params.config.n_clips;
    let query = "the person opens the door again".to_string();
    Sample {
        video_id: "bench".into(),
        tokens: tokenize(&query, &params.vocab),
        query,
        clips: SampledClips {
            features: filled(vec![n, params.config.d_in], 0.0),
            tau: 1.0,
            sources: (0..n).map(|i| i..i + 1).collect(),
        },
        gt: TimeSpan {
            start: 2.0,
            end: 6.0,
        },
        gt_span: MomentSpan { a: 2, b: 5 },
    }
}
