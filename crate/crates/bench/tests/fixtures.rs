use tan2d_bench::{filled, model, reduced_config, sample};
use tan2d_core::eval::score_map;
use tan2d_core::model::Runtime;

#[test]
fn fixtures_are_deterministic() {
    assert_eq!(filled(vec![3, 4], 1.5), filled(vec![3, 4], 1.5));
    assert_ne!(filled(vec![3, 4], 0.0), filled(vec![3, 4], 1.0));
}

#[test]
fn fixture_model_scores_a_sample() {
    let params = model(reduced_config(16, 8));
    let s = sample(&params);
    let rt = Runtime::new(&params.config).unwrap();
    let scores = score_map(&params, &rt, &s.tokens, &s.clips.features).unwrap();
    assert_eq!(scores.valid().len(), 136);
    assert!(scores.valid().into_iter().all(|(_, p)| p > 0.0 && p < 1.0));
}
