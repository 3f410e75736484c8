//! Objective, suppression, ranking metrics and inference.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Result, TanError};
use crate::model::{forward, ModelParams, Runtime};
use crate::numeric::{CustomOp, Tape, Tensor, Var};
use crate::query::tokenize;
use crate::tan::{best_moment, ScoreMap};
use crate::temporal_map::{iou, iou_seconds, label_map, CandidateMask, MomentSpan, TimeSpan};

pub const PROB_CLAMP: f64 = 1e-7;

struct Bce {
    targets: Vec<f64>,
}

impl CustomOp for Bce {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let c = self.targets.len() as f64;
        let grad = inputs[0]
            .iter()
            .zip(&self.targets)
            .map(|(&p, &y)| {
                if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                    0.0
                } else {
                    g[0] * (p - y) / (p * (1.0 - p)) / c
                }
            })
            .collect();
        vec![Some(grad)]
    }
}

/// Mean binary cross entropy, minimized during training.
pub fn bce_value(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(TanError::Internal(format!("{} scores against {} labels", p.len(), y.len())));
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / p.len() as f64)
}

/// Differentiable [`bce_value`] over a column of valid scores.
pub fn bce_loss(tape: &mut Tape, p: Var, y: &[f64]) -> Result<Var> {
    let value = bce_value(tape.value(p), y)?;
    tape.custom(vec![p], vec![], vec![value], Box::new(Bce { targets: y.to_vec() }))
}

/// Greedy suppression. Highest score first, ties to smaller `(a, b)`; every
/// remaining span with IoU at least `threshold` against a pick is dropped.
pub fn nms(candidates: &[(MomentSpan, f64)], threshold: f64) -> Vec<(MomentSpan, f64)> {
    let mut order: Vec<(MomentSpan, f64)> = candidates.to_vec();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.a.cmp(&y.0.a)).then(x.0.b.cmp(&y.0.b)));
    let mut kept: Vec<(MomentSpan, f64)> = Vec::new();
    let mut alive = vec![true; order.len()];
    for i in 0..order.len() {
        if !alive[i] {
            continue;
        }
        kept.push(order[i]);
        for j in i + 1..order.len() {
            if alive[j] && iou(order[i].0, order[j].0) >= threshold {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Percentage of queries whose top `n` predictions include one with IoU
/// strictly above `m`.
pub fn rank_n_at_m(predictions: &[Vec<TimeSpan>], gts: &[TimeSpan], n: usize, m: f64) -> Result<f64> {
    if predictions.len() != gts.len() {
        return Err(TanError::Eval(format!(
            "{} prediction lists for {} ground truths",
            predictions.len(),
            gts.len()
        )));
    }
    if n == 0 {
        return Err(TanError::Eval("n must be at least 1".into()));
    }
    if gts.is_empty() {
        return Err(TanError::Eval("no queries to evaluate".into()));
    }
    let hits = predictions
        .iter()
        .zip(gts)
        .filter(|(preds, gt)| preds.iter().take(n).any(|p| iou_seconds(*p, **gt) > m))
        .count();
    Ok(100.0 * hits as f64 / gts.len() as f64)
}

/// A ground-truth moment together with the length of its video.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub span: TimeSpan,
    pub duration: f64,
}

/// Best IoU any valid candidate reaches against `gt`.
pub fn best_candidate_iou(gt: GroundTruth, mask: &CandidateMask) -> f64 {
    let tau = gt.duration / mask.n() as f64;
    mask.candidates()
        .iter()
        .map(|s| iou_seconds(s.to_seconds(tau), gt.span))
        .fold(0.0, f64::max)
}

/// Score of an ideal model restricted to the candidate grid, per threshold.
pub fn upper_bound(gts: &[GroundTruth], mask: &CandidateMask, thresholds: &[f64]) -> Result<Vec<f64>> {
    if gts.is_empty() {
        return Err(TanError::Eval("no ground truths for upper bound".into()));
    }
    let best: Vec<f64> = gts.iter().map(|&g| best_candidate_iou(g, mask)).collect();
    Ok(thresholds
        .iter()
        .map(|&m| 100.0 * best.iter().filter(|&&b| b > m).count() as f64 / gts.len() as f64)
        .collect())
}

/// Rank n@m over a set of queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ns: Vec<usize>,
    pub ms: Vec<f64>,
    /// `table[i][j]` is Rank `ns[i]`@`ms[j]`.
    pub table: Vec<Vec<f64>>,
    pub candidates: usize,
    pub queries: usize,
    /// Mean objective, when scores came from the model.
    pub loss: Option<f64>,
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn get(&self, n: usize, m: f64) -> Option<f64> {
        let i = self.ns.iter().position(|&x| x == n)?;
        let j = self.ms.iter().position(|&x| x == m)?;
        Some(self.table[i][j])
    }

    /// Range and monotonicity checks.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.table.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=100.0).contains(&v) {
                    return Err(TanError::Eval(format!("Rank{}@{} = {v} out of range", self.ns[i], self.ms[j])));
                }
                for (k, &w) in row.iter().enumerate() {
                    if self.ms[k] > self.ms[j] && w > v {
                        return Err(TanError::Eval(format!("Rank{} increases with m", self.ns[i])));
                    }
                }
                for (k, other) in self.table.iter().enumerate() {
                    if self.ns[k] > self.ns[i] && other[j] < v {
                        return Err(TanError::Eval(format!("Rank n@{} decreases with n", self.ms[j])));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_predictions(
        predictions: &[Vec<TimeSpan>],
        gts: &[TimeSpan],
        ns: &[usize],
        ms: &[f64],
        candidates: usize,
    ) -> Result<Self> {
        let table = ns
            .iter()
            .map(|&n| ms.iter().map(|&m| rank_n_at_m(predictions, gts, n, m)).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let report = EvalReport {
            ns: ns.to_vec(),
            ms: ms.to_vec(),
            table,
            candidates,
            queries: gts.len(),
            loss: None,
            runtime_secs: 0.0,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,m,rank\n");
        for (i, &n) in self.ns.iter().enumerate() {
            for (j, &m) in self.ms.iter().enumerate() {
                out.push_str(&format!("{n},{m},{:.4}\n", self.table[i][j]));
            }
        }
        out
    }
}

/// One ranked retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Retrieval {
    pub a: usize,
    pub b: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

/// Score map for one query against one video's sampled clips.
pub fn score_map(params: &ModelParams, rt: &Runtime, tokens: &[usize], clips: &Tensor) -> Result<ScoreMap> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let p = forward(&mut tape, &vars, rt, tokens, clips)?;
    ScoreMap::new(rt.mask.clone(), tape.value(p).to_vec())
}

/// Ranked survivors of suppression, best first, at most `n`.
pub fn rank_scores(scores: &ScoreMap, tau: f64, nms_threshold: f64, n: usize) -> Result<Vec<Retrieval>> {
    if let Some((s, v)) = scores.valid().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(TanError::Numerical(format!("non-finite score {v} at ({}, {})", s.a, s.b)));
    }
    // Guards the empty-mask case with the same error as argmax.
    best_moment(scores)?;
    Ok(nms(&scores.valid(), nms_threshold)
        .into_iter()
        .take(n)
        .map(|(s, score)| Retrieval {
            a: s.a,
            b: s.b,
            start_sec: s.start_sec(tau),
            end_sec: s.end_sec(tau),
            score,
        })
        .collect())
}

/// Inference for a free-text query. Unknown words map to the unknown token.
pub fn predict_top_n(
    params: &ModelParams,
    rt: &Runtime,
    clips: &Tensor,
    tau: f64,
    query: &str,
    n: usize,
    nms_threshold: f64,
) -> Result<(Vec<Retrieval>, ScoreMap)> {
    let tokens = tokenize(query, &params.vocab);
    if tokens.is_empty() {
        return Err(TanError::Query(format!("query {query:?} has no words")));
    }
    let scores = score_map(params, rt, &tokens, clips)?;
    Ok((rank_scores(&scores, tau, nms_threshold, n)?, scores))
}

/// Evaluation settings shared by training and the standalone command.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub ns: Vec<usize>,
    pub ms: Vec<f64>,
    pub nms_threshold: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            ns: vec![1, 5],
            ms: vec![0.3, 0.5, 0.7],
            nms_threshold: 0.5,
            t_min: 0.5,
            t_max: 1.0,
        }
    }
}

/// Per-query outcome kept alongside the aggregate report.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub ranked: Vec<Retrieval>,
    pub loss: f64,
}

/// Forward every sample, rank its candidates and aggregate.
pub fn evaluate(
    params: &ModelParams,
    rt: &Runtime,
    samples: &[Sample],
    spec: &EvalSpec,
) -> Result<(EvalReport, Vec<QueryResult>)> {
    if samples.is_empty() {
        return Err(TanError::Eval("no samples to evaluate".into()));
    }
    let started = Instant::now();
    let keep = spec.ns.iter().copied().max().unwrap_or(1);
    let results = samples
        .iter()
        .map(|s| {
            let scores = score_map(params, rt, &s.tokens, &s.clips.features)?;
            let labels = label_map(s.gt_span, &rt.mask, spec.t_min, spec.t_max)?;
            let valid: Vec<f64> = rt.mask.valid_rows().iter().map(|&r| scores.scores[r]).collect();
            let loss = bce_value(&valid, &labels.valid_targets(&rt.mask))?;
            let ranked = rank_scores(&scores, s.clips.tau, spec.nms_threshold, keep)?;
            Ok(QueryResult { ranked, loss })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = summarize(&results, samples, spec, rt.mask.count(), started)?;
    Ok((report, results))
}

/// Aggregate a subset of per-query results.
pub fn summarize(
    results: &[QueryResult],
    samples: &[Sample],
    spec: &EvalSpec,
    candidates: usize,
    started: Instant,
) -> Result<EvalReport> {
    let preds: Vec<Vec<TimeSpan>> = results
        .iter()
        .map(|r| {
            r.ranked
                .iter()
                .map(|x| TimeSpan {
                    start: x.start_sec,
                    end: x.end_sec,
                })
                .collect()
        })
        .collect();
    let gts: Vec<TimeSpan> = samples.iter().map(|s| s.gt).collect();
    let mut report = EvalReport::from_predictions(&preds, &gts, &spec.ns, &spec.ms, candidates)?;
    report.loss = Some(results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64);
    report.runtime_secs = started.elapsed().as_secs_f64();
    Ok(report)
}
