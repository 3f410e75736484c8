//! The 2D temporal map: candidate selection, moment features and labels.
//!
//! Maps are stored densely as `N·N` rows of `d` channels, row index
//! `a * N + b` for the moment starting at clip `a` and ending at clip `b`.
//! Rows outside the candidate mask are held at exactly zero.

use std::sync::Arc;

use crate::error::{Result, TanError};
use crate::numeric::{kernels, CustomOp, RowPlacement, Tape, Tensor, Var};

/// Maps with at most this many clips enumerate every moment.
pub const DENSE_LIMIT: usize = 16;

/// Slack for float division when mapping seconds onto the clip grid.
const GRID_SLACK: f64 = 1e-9;

/// Inclusive clip-index span `[a, b]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MomentSpan {
    pub a: usize,
    pub b: usize,
}

impl MomentSpan {
    pub fn new(a: usize, b: usize) -> Result<Self> {
        if a > b {
            return Err(TanError::Annotation(format!("span start {a} after end {b}")));
        }
        Ok(MomentSpan { a, b })
    }

    pub fn len(&self) -> usize {
        self.b - self.a + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start_sec(&self, tau: f64) -> f64 {
        self.a as f64 * tau
    }

    pub fn end_sec(&self, tau: f64) -> f64 {
        (self.b + 1) as f64 * tau
    }

    pub fn to_seconds(&self, tau: f64) -> TimeSpan {
        TimeSpan {
            start: self.start_sec(tau),
            end: self.end_sec(tau),
        }
    }

    pub fn row(&self, n: usize) -> usize {
        self.a * n + self.b
    }
}

/// A span in seconds, half-open `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeSpan {
    pub start: f64,
    pub end: f64,
}

impl TimeSpan {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start >= end || start < 0.0 {
            return Err(TanError::Annotation(format!("invalid time span [{start}, {end})")));
        }
        Ok(TimeSpan { start, end })
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Inclusive-clip IoU of two spans.
pub fn iou(x: MomentSpan, y: MomentSpan) -> f64 {
    let lo = x.a.max(y.a);
    let hi = x.b.min(y.b);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = x.len() + y.len() - inter;
    inter as f64 / union as f64
}

/// Continuous IoU of two spans in seconds.
pub fn iou_seconds(x: TimeSpan, y: TimeSpan) -> f64 {
    let inter = (x.end.min(y.end) - x.start.max(y.start)).max(0.0);
    let union = x.duration() + y.duration() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn check_thresholds(t_min: f64, t_max: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t_min) || !(0.0..=1.0).contains(&t_max) || t_min >= t_max {
        return Err(TanError::Config(format!(
            "label thresholds need 0 <= t_min < t_max <= 1, got ({t_min}, {t_max})"
        )));
    }
    Ok(())
}

/// Linear rescaling of an IoU between two thresholds into a `[0, 1]` target.
pub fn scale_iou(o: f64, t_min: f64, t_max: f64) -> Result<f64> {
    check_thresholds(t_min, t_max)?;
    Ok(scale_iou_unchecked(o, t_min, t_max))
}

fn scale_iou_unchecked(o: f64, t_min: f64, t_max: f64) -> f64 {
    if o <= t_min {
        0.0
    } else if o >= t_max {
        1.0
    } else {
        (o - t_min) / (t_max - t_min)
    }
}

/// Quantize a second-unit annotation onto an `n`-clip grid of width `tau`.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // negated form also rejects NaN
pub fn seconds_to_span(start: f64, end: f64, tau: f64, n: usize) -> Result<MomentSpan> {
    if !(start < end) {
        return Err(TanError::Annotation(format!("start {start} is not before end {end}")));
    }
    if tau <= 0.0 || n == 0 {
        return Err(TanError::Config(format!("invalid clip grid tau={tau}, n={n}")));
    }
    let last = (n - 1) as f64;
    let a = (start / tau + GRID_SLACK).floor().clamp(0.0, last) as usize;
    let b = ((end / tau - GRID_SLACK).ceil() - 1.0).clamp(a as f64, last) as usize;
    Ok(MomentSpan { a, b })
}

/// Sparse selection rule for `n > 16`; lengths up to 16 always pass.
pub fn sparse_rule(a: usize, b: usize) -> bool {
    assert!(a <= b);
    let len = b - a + 1;
    // k = max(1, ceil(log2(len / 8))): smallest k >= 1 with 8 * 2^k >= len.
    let mut k = 1u32;
    while 8usize << k < len {
        k += 1;
    }
    let s = 1usize << (k - 1);
    let s_prime = if k == 1 { 0 } else { (1usize << (k + 2)) - 1 };
    a.is_multiple_of(s) && (b as i64 - s_prime as i64).rem_euclid(s as i64) == 0
}

/// Validity of every `(a, b)` cell on an `n × n` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateMask {
    n: usize,
    valid: Arc<[bool]>,
    candidates: Vec<MomentSpan>,
}

impl CandidateMask {
    /// The default selection: every moment for `n <= 16`, the sparse rule beyond.
    pub fn new(n: usize) -> Result<Self> {
        if n <= DENSE_LIMIT {
            Self::enumerate(n)
        } else {
            Self::from_rule(n, sparse_rule)
        }
    }

    /// Every `(a, b)` with `a <= b`.
    pub fn enumerate(n: usize) -> Result<Self> {
        Self::from_rule(n, |_, _| true)
    }

    pub fn from_rule(n: usize, rule: impl Fn(usize, usize) -> bool) -> Result<Self> {
        if n == 0 {
            return Err(TanError::Config("candidate mask needs at least one clip".into()));
        }
        let mut valid = vec![false; n * n];
        let mut candidates = Vec::new();
        for a in 0..n {
            for b in a..n {
                if rule(a, b) {
                    valid[a * n + b] = true;
                    candidates.push(MomentSpan { a, b });
                }
            }
        }
        Ok(CandidateMask {
            n,
            valid: valid.into(),
            candidates,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_valid(&self, a: usize, b: usize) -> bool {
        a < self.n && b < self.n && self.valid[a * self.n + b]
    }

    pub fn is_valid_row(&self, row: usize) -> bool {
        self.valid[row]
    }

    /// Per-row flags, row-major over `(a, b)`.
    pub fn flags(&self) -> Arc<[bool]> {
        Arc::clone(&self.valid)
    }

    /// Valid spans in row-major order.
    pub fn candidates(&self) -> &[MomentSpan] {
        &self.candidates
    }

    pub fn count(&self) -> usize {
        self.candidates.len()
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        self.candidates.iter().map(|s| s.row(self.n)).collect()
    }

    /// `a,b,valid,length` for every cell, then a summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,valid,length\n");
        for a in 0..self.n {
            for b in 0..self.n {
                let len = if a <= b { b - a + 1 } else { 0 };
                out.push_str(&format!("{a},{b},{},{len}\n", self.is_valid(a, b) as u8));
            }
        }
        out.push_str(&format!("# N={} C={}\n", self.n, self.count()));
        out
    }
}

/// Supervision targets and raw IoUs for every cell of a map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub n: usize,
    pub targets: Vec<f64>,
    pub ious: Vec<f64>,
}

impl LabelMap {
    /// Targets at the mask's valid cells, in candidate order.
    pub fn valid_targets(&self, mask: &CandidateMask) -> Vec<f64> {
        mask.candidates().iter().map(|s| self.targets[s.row(self.n)]).collect()
    }
}

pub fn label_map(gt: MomentSpan, mask: &CandidateMask, t_min: f64, t_max: f64) -> Result<LabelMap> {
    check_thresholds(t_min, t_max)?;
    let n = mask.n();
    if gt.b >= n {
        return Err(TanError::Annotation(format!("ground truth {gt:?} beyond {n} clips")));
    }
    let mut targets = vec![0.0; n * n];
    let mut ious = vec![0.0; n * n];
    for &span in mask.candidates() {
        let o = iou(span, gt);
        ious[span.row(n)] = o;
        targets[span.row(n)] = scale_iou_unchecked(o, t_min, t_max);
    }
    Ok(LabelMap { n, targets, ious })
}

/// Dense `N × N × d` moment feature map with its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalMap {
    pub features: Tensor,
    pub mask: CandidateMask,
}

impl TemporalMap {
    pub fn from_var(tape: &Tape, v: Var, mask: &CandidateMask) -> Result<Self> {
        let n = mask.n();
        let d = tape.shape(v).last().copied().unwrap_or(1);
        let features = Tensor::new(vec![n, n, d], tape.value(v).to_vec())?;
        Ok(TemporalMap {
            features,
            mask: mask.clone(),
        })
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn at(&self, a: usize, b: usize) -> &[f64] {
        self.features.row(a * self.mask.n() + b)
    }
}

struct MapMaxPool {
    /// Winning clip row per output element; `u32::MAX` at invalid cells.
    argmax: Vec<u32>,
    n: usize,
    d: usize,
}

impl CustomOp for MapMaxPool {
    fn name(&self) -> &'static str {
        "map_max_pool"
    }

    fn backward(&self, _inputs: &[&[f64]], _output: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; self.n * self.d];
        for (i, (&src, g)) in self.argmax.iter().zip(grad_out).enumerate() {
            if src != u32::MAX {
                gx[src as usize * self.d + i % self.d] += g;
            }
        }
        vec![Some(gx)]
    }
}

/// Max-pool clip features `[N × d]` over every valid span into an `[N·N × d]` map.
///
/// Gradients route to the winning clip per channel; ties go to the smallest
/// clip index.
pub fn build_map_pool(tape: &mut Tape, clips: Var, mask: &CandidateMask) -> Result<Var> {
    let n = mask.n();
    let shape = tape.shape(clips);
    if shape.len() != 2 || shape[0] != n {
        return Err(TanError::Dimension(format!("clip features {shape:?} for a {n}-clip map")));
    }
    let d = shape[1];
    let x = tape.value(clips);
    let mut out = vec![0.0; n * n * d];
    let mut argmax = vec![u32::MAX; n * n * d];
    let mut best = vec![0.0; d];
    let mut best_idx = vec![0u32; d];
    for a in 0..n {
        best.copy_from_slice(&x[a * d..(a + 1) * d]);
        best_idx.fill(a as u32);
        for b in a..n {
            if b > a {
                for c in 0..d {
                    let v = x[b * d + c];
                    // Strict comparison keeps the earliest clip on ties.
                    if v > best[c] {
                        best[c] = v;
                        best_idx[c] = b as u32;
                    }
                }
            }
            if mask.is_valid(a, b) {
                let row = (a * n + b) * d;
                out[row..row + d].copy_from_slice(&best);
                argmax[row..row + d].copy_from_slice(&best_idx);
            }
        }
    }
    tape.custom(
        vec![clips],
        vec![n * n, d],
        out,
        Box::new(MapMaxPool { argmax, n, d }),
    )
}

struct Conv1d {
    n_in: usize,
    k: usize,
    d_in: usize,
    d_out: usize,
}

impl CustomOp for Conv1d {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let n_out = self.n_in + 1 - self.k;
        let (di, dout) = (self.d_in, self.d_out);
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; dout];
        for row in g.chunks_exact(dout) {
            kernels::add_assign(&mut gb, row);
        }
        for t in 0..self.k {
            let wt = &w[t * di * dout..(t + 1) * di * dout];
            let xs = &x[t * di..(t + n_out) * di];
            kernels::gemm(
                n_out,
                dout,
                di,
                g,
                kernels::Layout::Plain,
                wt,
                kernels::Layout::Transposed,
                &mut gx[t * di..(t + n_out) * di],
                true,
            );
            kernels::gemm(
                di,
                n_out,
                dout,
                xs,
                kernels::Layout::Transposed,
                g,
                kernels::Layout::Plain,
                &mut gw[t * di * dout..(t + 1) * di * dout],
                true,
            );
        }
        vec![Some(gx), Some(gw), Some(gb)]
    }
}

/// Valid 1-D convolution over the clip axis, stride 1.
///
/// `x: [n × d_in]`, `weight: [k·d_in × d_out]` (tap-major), `bias: [d_out]`.
pub fn conv1d_valid(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[1] == 0 || !ws[0].is_multiple_of(xs[1]) {
        return Err(TanError::Dimension(format!("conv1d of {xs:?} with weight {ws:?}")));
    }
    let (n_in, d_in, d_out) = (xs[0], xs[1], ws[1]);
    let k = ws[0] / d_in;
    if k == 0 || k > n_in || tape.value(bias).len() != d_out {
        return Err(TanError::Dimension(format!(
            "conv1d kernel {k} over {n_in} clips, bias {}",
            tape.value(bias).len()
        )));
    }
    let n_out = n_in + 1 - k;
    let mut out = vec![0.0; n_out * d_out];
    {
        let (xv, wv, bv) = (tape.value(x), tape.value(weight), tape.value(bias));
        for t in 0..k {
            kernels::gemm(
                n_out,
                d_in,
                d_out,
                &xv[t * d_in..(t + n_out) * d_in],
                kernels::Layout::Plain,
                &wv[t * d_in * d_out..(t + 1) * d_in * d_out],
                kernels::Layout::Plain,
                &mut out,
                true,
            );
        }
        for row in out.chunks_exact_mut(d_out) {
            kernels::add_assign(row, bv);
        }
    }
    tape.custom(
        vec![x, weight, bias],
        vec![n_out, d_out],
        out,
        Box::new(Conv1d { n_in, k, d_in, d_out }),
    )
}

/// Moment features from a stack of kernel-2 convolutions.
///
/// The diagonal holds the clips themselves and layer `ℓ` (1-based) fills
/// spans of length `ℓ + 1`. Valid spans longer than the stack reaches are
/// filled by max pooling.
pub fn build_map_conv(tape: &mut Tape, clips: Var, stack: &[(Var, Var)], mask: &CandidateMask) -> Result<Var> {
    let n = mask.n();
    if stack.len() + 1 > n {
        return Err(TanError::Config(format!(
            "map convolution stack of depth {} needs at least {} clips, have {n}",
            stack.len(),
            stack.len() + 1
        )));
    }
    let shape = tape.shape(clips).to_vec();
    if shape.len() != 2 || shape[0] != n {
        return Err(TanError::Dimension(format!("clip features {shape:?} for a {n}-clip map")));
    }
    let d = shape[1];
    let mut layers = Vec::with_capacity(stack.len());
    let mut cur = clips;
    for &(w, b) in stack {
        if tape.shape(w) != [2 * d, d] {
            return Err(TanError::Config(format!(
                "map convolution weight {:?}, expected [{}, {d}]",
                tape.shape(w),
                2 * d
            )));
        }
        cur = conv1d_valid(tape, cur, w, b)?;
        layers.push(cur);
    }
    let reach = stack.len() + 1;
    let mut placements = vec![RowPlacement {
        source: clips,
        rows: Vec::new(),
    }];
    placements.extend(layers.iter().map(|&source| RowPlacement {
        source,
        rows: Vec::new(),
    }));
    let mut pooled_rows = Vec::new();
    for span in mask.candidates() {
        let len = span.len();
        if len <= reach {
            placements[len - 1].rows.push((span.a, span.row(n)));
        } else {
            pooled_rows.push((span.row(n), span.row(n)));
        }
    }
    if !pooled_rows.is_empty() {
        let pooled = build_map_pool(tape, clips, mask)?;
        placements.push(RowPlacement {
            source: pooled,
            rows: pooled_rows,
        });
    }
    tape.assemble_rows(n * n, d, placements)
}
