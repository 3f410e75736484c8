//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable call appends one node holding its output value and
//! enough bookkeeping to propagate a gradient back to its inputs. Calling
//! [`Tape::backward`] walks the nodes from the output down to index 0 exactly
//! once, summing contributions where a value fans out to several consumers.
//!
//! Domain operations whose backward rule does not belong here (map pooling,
//! masked convolution, the loss) plug in through [`CustomOp`].

use std::sync::Arc;

use super::kernels::{self, Layout};
use super::tensor::Tensor;
use crate::error::{Result, TanError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for an operation computed outside the tape.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in the order the inputs were
    /// registered. `None` means no gradient flows to that input.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// Rows copied from one source into an assembled output.
#[derive(Clone, Debug)]
pub struct RowPlacement {
    pub source: Var,
    /// `(source_row, output_row)` pairs.
    pub rows: Vec<(usize, usize)>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Scale(Var, f64),
    Sum(Var),
    AddRowBias(Var, Var),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    MaskRows { x: Var, keep: Arc<[bool]> },
    Assemble(Vec<RowPlacement>),
    NormalizeRows { x: Var, eps: f64 },
    NormalizeWhole { x: Var, eps: f64 },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Record of executed differentiable operations. Single-threaded; build one
/// tape per sample and drop it after the backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(msg: String) -> TanError {
    TanError::Dimension(msg)
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        n => (shape[..n - 1].iter().product(), shape[n - 1]),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copy a node out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_raw(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(dim_err(format!("leaf shape {shape:?} vs {} values", value.len())));
        }
        Ok(self.push(shape, value, Op::Leaf))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op)
    }

    fn zip_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op)
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a),
            Layout::Plain,
            self.value(b),
            Layout::Plain,
            &mut out,
            false,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    /// Adds a length-`cols` bias vector to every row of a matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x));
        if self.value(bias).len() != cols {
            return Err(dim_err(format!(
                "bias of length {} for {cols} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            kernels::add_assign(&mut out[r * cols..(r + 1) * cols], b);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddRowBias(x, bias)))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x));
        if start + len > cols {
            return Err(dim_err(format!("column slice {start}..{} of {cols}", start + len)));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }))
    }

    /// Select rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, cols) = matrix_dims(self.shape(x));
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(dim_err(format!("row {bad} out of {n}")));
        }
        let mut out = Vec::new();
        kernels::gather_rows(self.value(x), cols, &rows, &mut out);
        Ok(self.push(vec![rows.len(), cols], out, Op::GatherRows { x, rows }))
    }

    /// Zero every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: Arc<[bool]>) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x));
        if keep.len() != rows {
            return Err(dim_err(format!("mask of {} rows for {rows}", keep.len())));
        }
        let mut out = self.value(x).to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out[r * cols..(r + 1) * cols].fill(0.0);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::MaskRows { x, keep }))
    }

    /// Build a `rows×cols` matrix from rows of other nodes; unplaced rows are zero.
    pub fn assemble_rows(&mut self, rows: usize, cols: usize, placements: Vec<RowPlacement>) -> Result<Var> {
        let mut out = vec![0.0; rows * cols];
        for p in &placements {
            let (src_rows, src_cols) = matrix_dims(self.shape(p.source));
            if src_cols != cols {
                return Err(dim_err(format!("assemble: source has {src_cols} columns, need {cols}")));
            }
            let src = self.value(p.source);
            for &(s, d) in &p.rows {
                if s >= src_rows || d >= rows {
                    return Err(dim_err(format!("assemble: row pair ({s}, {d}) out of range")));
                }
                out[d * cols..(d + 1) * cols].copy_from_slice(&src[s * cols..(s + 1) * cols]);
            }
        }
        Ok(self.push(vec![rows, cols], out, Op::Assemble(placements)))
    }

    /// Divide each row (channel vector) by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TanError::Config(format!("normalization eps must be > 0, got {eps}")));
        }
        let (rows, cols) = matrix_dims(self.shape(x));
        if cols == 0 {
            return Err(dim_err("normalization over zero channels".into()));
        }
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let denom = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= denom);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::NormalizeRows { x, eps }))
    }

    /// Divide the whole tensor by `max(‖x‖_F, eps)`.
    pub fn l2_normalize_whole(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TanError::Config(format!("normalization eps must be > 0, got {eps}")));
        }
        let denom = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        Ok(self.map_unary(x, |v| v / denom, Op::NormalizeWhole { x, eps }))
    }

    /// Register an externally computed value with its backward rule.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Box<dyn CustomOp>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(dim_err(format!("{}: shape {shape:?} vs {} values", op.name(), value.len())));
        }
        Ok(self.push(shape, value, Op::Custom { inputs, op }))
    }

    /// Gradients of a scalar node with respect to every node recorded before it.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        self.backward_with(output, vec![1.0])
    }

    /// Backward pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, output: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(output).len() {
            return Err(dim_err("seed length differs from output".into()));
        }
        // Fresh, zeroed accumulation slots on every call.
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let mut acc = |v: Var, contrib: Vec<f64>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, Layout::Plain, val(*b), Layout::Transposed, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, val(*a), Layout::Transposed, g, Layout::Plain, &mut gb, false);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(&node.value).map(|(g, s)| g * s * (1.0 - s)).collect();
                acc(*x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.iter().zip(&node.value).map(|(g, t)| g * (1.0 - t * t)).collect();
                acc(*x, gx);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, gx);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::AddRowBias(x, bias) => {
                let cols = val(*bias).len();
                let mut gb = vec![0.0; cols];
                for row in g.chunks_exact(cols) {
                    kernels::add_assign(&mut gb, row);
                }
                acc(*x, g.to_vec());
                acc(*bias, gb);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = matrix_dims(&self.nodes[x.0].shape);
                let len = node.shape[1];
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*x, gx);
            }
            Op::GatherRows { x, rows } => {
                let cols = node.shape[1];
                let mut gx = vec![0.0; val(*x).len()];
                kernels::scatter_add_rows(g, cols, rows, &mut gx);
                acc(*x, gx);
            }
            Op::MaskRows { x, keep } => {
                let cols = g.len() / keep.len().max(1);
                let mut gx = g.to_vec();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        gx[r * cols..(r + 1) * cols].fill(0.0);
                    }
                }
                acc(*x, gx);
            }
            Op::Assemble(placements) => {
                let cols = node.shape[1];
                for p in placements {
                    let mut gs = vec![0.0; val(p.source).len()];
                    for &(s, d) in &p.rows {
                        kernels::add_assign(&mut gs[s * cols..(s + 1) * cols], &g[d * cols..(d + 1) * cols]);
                    }
                    acc(p.source, gs);
                }
            }
            Op::NormalizeRows { x, eps } => {
                let cols = *node.shape.last().unwrap_or(&1);
                let xv = val(*x);
                let mut gx = vec![0.0; xv.len()];
                for ((gr, yr), (xr, out)) in g
                    .chunks_exact(cols)
                    .zip(node.value.chunks_exact(cols))
                    .zip(xv.chunks_exact(cols).zip(gx.chunks_exact_mut(cols)))
                {
                    normalize_vjp(xr, yr, gr, *eps, out);
                }
                acc(*x, gx);
            }
            Op::NormalizeWhole { x, eps } => {
                let mut gx = vec![0.0; g.len()];
                normalize_vjp(val(*x), &node.value, g, *eps, &mut gx);
                acc(*x, gx);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&[f64]> = inputs.iter().map(|v| val(*v)).collect();
                let out = op.backward(&ins, &node.value, g);
                assert_eq!(out.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (v, gv) in inputs.iter().zip(out) {
                    if let Some(gv) = gv {
                        acc(*v, gv);
                    }
                }
            }
        }
    }
}

/// VJP of `y = x / max(‖x‖, eps)`.
fn normalize_vjp(x: &[f64], y: &[f64], g: &[f64], eps: f64, out: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm >= eps {
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, gi), yi) in out.iter_mut().zip(g).zip(y) {
            *o = (gi - yi * dot) / norm;
        }
    } else {
        for (o, gi) in out.iter_mut().zip(g) {
            *o = gi / eps;
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => kernels::add_assign(existing, &contrib),
        slot @ None => *slot = Some(contrib),
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        t.leaf_raw(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut t = Tape::new();
        let i2 = leaf(&mut t, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = leaf(&mut t, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = leaf(&mut t, vec![1, 2], vec![1.0, 2.0]);
        let z = leaf(&mut t, vec![2, 1], vec![0.0, 0.0]);
        let p = t.matmul(a, z).unwrap();
        assert_eq!(t.value(p), &[0.0]);
        assert_eq!(t.shape(p), &[1, 1]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let mut t = Tape::new();
        let a = leaf(&mut t, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut t, vec![2, 3], vec![0.0; 6]);
        assert!(matches!(t.matmul(a, b), Err(TanError::Dimension(_))));
    }

    #[test]
    fn binary_ops_reject_shape_mismatch() {
        let mut t = Tape::new();
        let a = leaf(&mut t, vec![2], vec![0.0; 2]);
        let b = leaf(&mut t, vec![3], vec![0.0; 3]);
        assert!(t.add(a, b).is_err());
        assert!(t.mul(a, b).is_err());
    }

    #[test]
    fn activations_at_zero() {
        let mut t = Tape::new();
        let z = leaf(&mut t, vec![1], vec![0.0]);
        let s = t.sigmoid(z);
        let h = t.tanh(z);
        assert_eq!(t.value(s), &[0.5]);
        assert_eq!(t.value(h), &[0.0]);
    }

    #[test]
    fn fan_out_sums_exactly() {
        let x0 = 0.731;
        let single = {
            let mut t = Tape::new();
            let x = leaf(&mut t, vec![1], vec![x0]);
            let y = t.tanh(x);
            let g = t.backward(y).unwrap();
            g.get(x).unwrap()[0]
        };
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![1], vec![x0]);
        let y1 = t.tanh(x);
        let y2 = t.tanh(x);
        let y = t.add(y1, y2).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[0], 2.0 * single);
    }

    #[test]
    fn normalize_three_four_five() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]);
        let y = t.l2_normalize_rows(x, 1e-8).unwrap();
        let v = t.value(y);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn unrelated_nodes_get_no_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![1], vec![1.0]);
        let y = leaf(&mut t, vec![1], vec![2.0]);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn assemble_places_rows_and_routes_gradients() {
        let mut t = Tape::new();
        let a = leaf(&mut t, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = t
            .assemble_rows(
                3,
                2,
                vec![RowPlacement {
                    source: a,
                    rows: vec![(1, 0), (1, 2)],
                }],
            )
            .unwrap();
        assert_eq!(t.value(out), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        let s = t.sum(out);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, 0.0, 2.0, 2.0]);
    }
}
