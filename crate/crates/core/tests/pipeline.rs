use tan2d_core::checkpoint::Checkpoint;
use tan2d_core::corpus::{load_samples, CorpusManifest, Split};
use tan2d_core::eval::{evaluate, predict_top_n, upper_bound, GroundTruth};
use tan2d_core::model::Runtime;
use tan2d_core::synth::{generate_synthetic_corpus, GeneratorConfig};
use tan2d_core::temporal_map::{CandidateMask, MomentSpan};
use tan2d_core::train::{train, TrainConfig, TrainData, TrainOptions};

fn corpus(dir: &std::path::Path, videos: usize) -> CorpusManifest {
    let cfg = GeneratorConfig {
        n_videos: videos,
        d_in: 12,
        seed: 3,
        ..GeneratorConfig::default()
    };
    generate_synthetic_corpus(&cfg).unwrap().write(dir).unwrap();
    CorpusManifest::load(&dir.join("manifest.jsonl")).unwrap()
}

fn tiny() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        lr: 1e-3,
        batch_size: 4,
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
fn generate_train_checkpoint_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 16);
    let data = TrainData::from_manifest(&manifest, 8).unwrap();
    assert_eq!(data.d_in().unwrap(), 12);

    let out = dir.path().join("run");
    let cfg = tiny();
    let outcome = train(
        &cfg,
        &data,
        TrainOptions {
            out_dir: Some(out.clone()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(outcome.history.iter().filter(|r| r.split == "train").count(), 2);

    let last = Checkpoint::load(&out.join("last.ckpt"), Some(&outcome.params.config)).unwrap();
    assert_eq!(last.params, outcome.params);
    assert_eq!(last.meta.epoch, 2);
    let best = Checkpoint::load(&out.join("best.ckpt"), None).unwrap();
    assert_eq!(best.params, outcome.best);

    let rt = Runtime::new(&best.params.config).unwrap();
    let test = load_samples(&manifest.split(Split::Test), &best.params.vocab, 8).unwrap();
    let (report, results) = evaluate(&best.params, &rt, &test, &cfg.eval_spec()).unwrap();
    report.validate().unwrap();
    assert_eq!(results.len(), test.len());
    assert_eq!(report.candidates, CandidateMask::new(8).unwrap().count());

    let sample = &test[0];
    let (ranked, scores) = predict_top_n(
        &best.params,
        &rt,
        &sample.clips.features,
        sample.clips.tau,
        &sample.query,
        5,
        0.5,
    )
    .unwrap();
    assert!(!ranked.is_empty() && ranked.len() <= 5);
    let duration = 8.0 * sample.clips.tau;
    for r in &ranked {
        assert!(0.0 <= r.start_sec && r.start_sec < r.end_sec && r.end_sec <= duration + 1e-9);
        assert_eq!(r.score, scores.at(MomentSpan { a: r.a, b: r.b }));
    }
    assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn upper_bound_on_generated_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 30);
    let samples = load_samples(&manifest, &tan2d_core::query::Vocabulary::from_texts([""]), 64).unwrap();
    let gts: Vec<GroundTruth> = samples
        .iter()
        .map(|s| GroundTruth {
            span: s.gt,
            duration: s.duration(),
        })
        .collect();
    let ms = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut prev = vec![0.0; ms.len()];
    for n in [16, 32, 64] {
        let sparse = upper_bound(&gts, &CandidateMask::new(n).unwrap(), &ms).unwrap();
        let dense = upper_bound(&gts, &CandidateMask::enumerate(n).unwrap(), &ms).unwrap();
        for i in 0..ms.len() {
            assert!(dense[i] >= sparse[i], "N={n} m={}", ms[i]);
            assert!(sparse[i] >= prev[i], "N={n} m={}", ms[i]);
            if i > 0 {
                assert!(sparse[i] <= sparse[i - 1]);
            }
        }
        prev = sparse;
    }
}
