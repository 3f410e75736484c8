//! Cross-modal fusion, the masked temporal adjacent convolution stack and the
//! score head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TanError};
use crate::numeric::{kernels, CustomOp, Linear, LinearVars, Tape, Tensor, Var};
use crate::temporal_map::{CandidateMask, MomentSpan};

/// Scope of the normalization applied after the Hadamard product.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionNorm {
    /// Each position's channel vector is scaled to unit length.
    #[default]
    PerPosition,
    /// The whole valid map is scaled to unit Frobenius norm.
    WholeMap,
}

/// Projections of sentence and map features into the shared space. Both are
/// plain linear maps (no bias).
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    /// `[d_s × d_o]`
    pub sentence: Tensor,
    /// `[d_v × d_o]`
    pub map: Tensor,
    pub eps: f64,
    pub norm: FusionNorm,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(d_s: usize, d_v: usize, d_o: usize, rng: &mut R) -> Self {
        let bs = 1.0 / (d_s as f64).sqrt();
        let bv = 1.0 / (d_v as f64).sqrt();
        FusionParams {
            sentence: Tensor::uniform(vec![d_s, d_o], -bs, bs, rng),
            map: Tensor::uniform(vec![d_v, d_o], -bv, bv, rng),
            eps: 1e-8,
            norm: FusionNorm::PerPosition,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> FusionVars {
        FusionVars {
            sentence: tape.leaf(&self.sentence),
            map: tape.leaf(&self.map),
            eps: self.eps,
            norm: self.norm,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub sentence: Var,
    pub map: Var,
    pub eps: f64,
    pub norm: FusionNorm,
}

/// Project both modalities, take their Hadamard product with the sentence
/// broadcast over every position, and normalize. Invalid positions stay zero.
///
/// `sentence: [1 × d_s]`, `map: [N·N × d_v]` → `[N·N × d_o]`.
pub fn fuse(tape: &mut Tape, sentence: Var, map: Var, params: &FusionVars, mask: &CandidateMask) -> Result<Var> {
    let n2 = mask.n() * mask.n();
    if tape.shape(map)[0] != n2 {
        return Err(TanError::Config(format!(
            "map has {} rows, mask expects {n2}",
            tape.shape(map)[0]
        )));
    }
    if tape.shape(sentence).last() != tape.shape(params.sentence).first()
        || tape.shape(map).last() != tape.shape(params.map).first()
        || tape.shape(params.sentence)[1] != tape.shape(params.map)[1]
    {
        return Err(TanError::Config(format!(
            "fusion shapes: sentence {:?}·{:?}, map {:?}·{:?}",
            tape.shape(sentence),
            tape.shape(params.sentence),
            tape.shape(map),
            tape.shape(params.map)
        )));
    }
    let s = tape.matmul(sentence, params.sentence)?;
    let ones = tape.leaf_raw(vec![n2, 1], vec![1.0; n2])?;
    let s_all = tape.matmul(ones, s)?;
    let m = tape.matmul(map, params.map)?;
    let prod = tape.mul(s_all, m)?;
    let prod = tape.mask_rows(prod, mask.flags())?;
    match params.norm {
        FusionNorm::PerPosition => tape.l2_normalize_rows(prod, params.eps),
        FusionNorm::WholeMap => tape.l2_normalize_whole(prod, params.eps),
    }
}

/// Gather/scatter lists for each kernel offset of a masked 2D convolution.
#[derive(Debug)]
pub struct ConvPlan {
    n: usize,
    k: usize,
    valid: Arc<[bool]>,
    /// Per offset `di * k + dj`: output rows and the input rows feeding them.
    offsets: Vec<(Vec<usize>, Vec<usize>)>,
}

impl ConvPlan {
    pub fn new(mask: &CandidateMask, k: usize) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(TanError::Config(format!("kernel size must be odd, got {k}")));
        }
        let n = mask.n() as isize;
        let pad = (k / 2) as isize;
        let mut offsets = Vec::with_capacity(k * k);
        for di in 0..k as isize {
            for dj in 0..k as isize {
                let (mut outs, mut ins) = (Vec::new(), Vec::new());
                for span in mask.candidates() {
                    let (ia, ib) = (span.a as isize + di - pad, span.b as isize + dj - pad);
                    if ia < 0 || ib < 0 || ia >= n || ib >= n {
                        continue;
                    }
                    if mask.is_valid(ia as usize, ib as usize) {
                        outs.push(span.row(mask.n()));
                        ins.push((ia * n + ib) as usize);
                    }
                }
                offsets.push((outs, ins));
            }
        }
        Ok(ConvPlan {
            n: mask.n(),
            k,
            valid: mask.flags(),
            offsets,
        })
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Total multiply-accumulate pairs per channel block.
    pub fn pair_count(&self) -> usize {
        self.offsets.iter().map(|(o, _)| o.len()).sum()
    }
}

/// One `K × K` layer; weight is `[K·K·d_in × d_out]`, offset-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TanConvStack {
    pub kernel: usize,
    pub layers: Vec<ConvLayer>,
}

impl TanConvStack {
    /// Uniform in `±1/sqrt(K·K·d)`, zero bias.
    pub fn init<R: Rng + ?Sized>(layers: usize, kernel: usize, d: usize, rng: &mut R) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(TanError::Config(format!("kernel size must be odd, got {kernel}")));
        }
        let fan_in = kernel * kernel * d;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(TanConvStack {
            kernel,
            layers: (0..layers)
                .map(|_| ConvLayer {
                    weight: Tensor::uniform(vec![fan_in, d], -bound, bound, rng),
                    bias: Tensor::zeros(vec![d]),
                })
                .collect(),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<LinearVars> {
        self.layers
            .iter()
            .map(|l| LinearVars {
                weight: tape.leaf(&l.weight),
                bias: tape.leaf(&l.bias),
            })
            .collect()
    }

    /// Chebyshev radius of each output's dependence on the input.
    pub fn receptive_radius(&self) -> usize {
        self.layers.len() * (self.kernel - 1) / 2
    }
}

struct MaskedConv {
    plan: Arc<ConvPlan>,
    d_in: usize,
    d_out: usize,
}

impl CustomOp for MaskedConv {
    fn name(&self) -> &'static str {
        "masked_conv2d"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (di, dout) = (self.d_in, self.d_out);
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; dout];
        for (row, &valid) in g.chunks_exact(dout).zip(self.plan.valid.iter()) {
            if valid {
                kernels::add_assign(&mut gb, row);
            }
        }
        let (mut xg, mut gg) = (Vec::new(), Vec::new());
        let mut dxg = Vec::new();
        for (o, (outs, ins)) in self.plan.offsets.iter().enumerate() {
            let p = outs.len();
            if p == 0 {
                continue;
            }
            let wo = &w[o * di * dout..(o + 1) * di * dout];
            kernels::gather_rows(x, di, ins, &mut xg);
            kernels::gather_rows(g, dout, outs, &mut gg);
            kernels::gemm(
                di,
                p,
                dout,
                &xg,
                kernels::Layout::Transposed,
                &gg,
                kernels::Layout::Plain,
                &mut gw[o * di * dout..(o + 1) * di * dout],
                true,
            );
            dxg.clear();
            dxg.resize(p * di, 0.0);
            kernels::gemm(
                p,
                dout,
                di,
                &gg,
                kernels::Layout::Plain,
                wo,
                kernels::Layout::Transposed,
                &mut dxg,
                false,
            );
            kernels::scatter_add_rows(&dxg, di, ins, &mut gx);
        }
        vec![Some(gx), Some(gw), Some(gb)]
    }
}

/// One masked `K × K` convolution over an `[N·N × d_in]` map.
///
/// Inputs at invalid or out-of-map positions contribute nothing (no count
/// renormalization) and invalid outputs are exactly zero.
pub fn masked_conv_forward(tape: &mut Tape, x: Var, layer: &LinearVars, plan: &Arc<ConvPlan>) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(layer.weight).to_vec();
    let n2 = plan.n * plan.n;
    let kk = plan.k * plan.k;
    if xs.len() != 2 || xs[0] != n2 || ws.len() != 2 || ws[0] != kk * xs[1] {
        return Err(TanError::Dimension(format!(
            "masked conv of {xs:?} with weight {ws:?} (K={}, N={})",
            plan.k, plan.n
        )));
    }
    let (d_in, d_out) = (xs[1], ws[1]);
    if tape.value(layer.bias).len() != d_out {
        return Err(TanError::Dimension("masked conv bias length".into()));
    }
    let mut out = vec![0.0; n2 * d_out];
    {
        let (xv, wv) = (tape.value(x), tape.value(layer.weight));
        let (mut xg, mut t) = (Vec::new(), Vec::new());
        for (o, (outs, ins)) in plan.offsets.iter().enumerate() {
            let p = outs.len();
            if p == 0 {
                continue;
            }
            kernels::gather_rows(xv, d_in, ins, &mut xg);
            t.clear();
            t.resize(p * d_out, 0.0);
            kernels::gemm(
                p,
                d_in,
                d_out,
                &xg,
                kernels::Layout::Plain,
                &wv[o * d_in * d_out..(o + 1) * d_in * d_out],
                kernels::Layout::Plain,
                &mut t,
                false,
            );
            kernels::scatter_add_rows(&t, d_out, outs, &mut out);
        }
        let bv = tape.value(layer.bias);
        for (row, &valid) in out.chunks_exact_mut(d_out).zip(plan.valid.iter()) {
            if valid {
                kernels::add_assign(row, bv);
            }
        }
    }
    tape.custom(
        vec![x, layer.weight, layer.bias],
        vec![n2, d_out],
        out,
        Box::new(MaskedConv {
            plan: Arc::clone(plan),
            d_in,
            d_out,
        }),
    )
}

/// The full stack: each layer is a masked convolution followed by a rectifier.
pub fn tan_forward(tape: &mut Tape, x: Var, layers: &[LinearVars], plan: &Arc<ConvPlan>) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        let c = masked_conv_forward(tape, h, layer, plan)?;
        h = tape.relu(c);
    }
    Ok(h)
}

/// Per-position affine map to one logit, sigmoid, invalid positions zeroed.
/// Returns an `[N·N × 1]` column.
pub fn score_head(tape: &mut Tape, h: Var, head: &LinearVars, mask: &CandidateMask) -> Result<Var> {
    let logits = head.apply(tape, h)?;
    if tape.shape(logits)[1] != 1 {
        return Err(TanError::Dimension("score head must produce one logit".into()));
    }
    let p = tape.sigmoid(logits);
    tape.mask_rows(p, mask.flags())
}

pub fn init_head<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Linear {
    Linear::init(d, 1, rng)
}

/// Matching probabilities on the 2D map.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub mask: CandidateMask,
    /// Row-major `N·N` scores, zero at invalid cells.
    pub scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(mask: CandidateMask, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != mask.n() * mask.n() {
            return Err(TanError::Dimension(format!(
                "{} scores for a {}x{} map",
                scores.len(),
                mask.n(),
                mask.n()
            )));
        }
        Ok(ScoreMap { mask, scores })
    }

    pub fn at(&self, span: MomentSpan) -> f64 {
        self.scores[span.row(self.mask.n())]
    }

    /// `(span, score)` for every valid cell in row-major order.
    pub fn valid(&self) -> Vec<(MomentSpan, f64)> {
        self.mask.candidates().iter().map(|&s| (s, self.at(s))).collect()
    }

    /// `N` lines of `N` comma-separated scores.
    pub fn to_csv(&self) -> String {
        let n = self.mask.n();
        let mut out = String::new();
        for a in 0..n {
            let row: Vec<String> = (0..n).map(|b| format!("{}", self.scores[a * n + b])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Highest-scoring valid span; ties go to the smaller start, then smaller end.
pub fn best_moment(scores: &ScoreMap) -> Result<MomentSpan> {
    let mut best: Option<(MomentSpan, f64)> = None;
    for &span in scores.mask.candidates() {
        let s = scores.at(span);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((span, s));
        }
    }
    best.map(|(s, _)| s)
        .ok_or_else(|| TanError::Internal("score map has no valid candidates".into()))
}
