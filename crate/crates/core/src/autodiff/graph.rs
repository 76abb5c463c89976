use super::tensor::{gemm, Tensor};
use crate::par::{self, Execution};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Gelu,
    Sigmoid,
    Sqrt,
    Recip,
    Square,
    /// `a·x + b`
    Affine(f64, f64),
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                0.5 * x * (1.0 + fast_tanh(u))
            }
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::Square => x * x,
            Unary::Affine(a, b) => a * x + b,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                let t = fast_tanh(u);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Sqrt => 0.5 / y,
            Unary::Recip => -y * y,
            Unary::Square => 2.0 * x,
            Unary::Affine(a, _) => a,
        }
    }
}

fn fast_tanh(u: f64) -> f64 {
    let u = u.clamp(-20.0, 20.0);
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddTiled(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    ShiftBy(Var, Var),
    Unary(Var, Unary),
    RowSum(Var),
    SumAll(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Attention { qkv: Var, tokens: usize, heads: usize, probs: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ComplexScaleRows(Var, Vec<(f64, f64)>),
    ClampMin(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode automatic differentiation tape over dense matrices.
///
/// Nodes are appended in evaluation order; [`Graph::backward`] walks them in
/// reverse. Constants (noise realizations, fixed gains) never receive
/// gradients.
pub struct Graph {
    nodes: Vec<Node>,
    exec: Execution,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), exec: Execution::default() }
    }

    pub fn with_execution(exec: Execution) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(rows, cols))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `x (n×c) + bias (1×c)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.shape(), (1, xv.cols()), "bias shape mismatch");
        let mut value = xv.clone();
        let c = xv.cols();
        for row in value.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(value, Op::AddRowBias(x, bias), rg)
    }

    /// `x ((g·t)×c) + tile (t×c)` repeated over each group of `t` rows.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Var {
        let (xv, tv) = (self.value(x), self.value(tile));
        assert_eq!(xv.cols(), tv.cols(), "tile width mismatch");
        assert_eq!(xv.rows() % tv.rows(), 0, "rows not a multiple of tile height");
        let mut value = xv.clone();
        for block in value.data_mut().chunks_mut(tv.len()) {
            for (v, t) in block.iter_mut().zip(tv.data()) {
                *v += t;
            }
        }
        let rg = self.rg(&[x, tile]);
        self.push(value, Op::AddTiled(x, tile), rg)
    }

    /// Scales row `i` of `x` by `s[i]` (`s` is `n×1`).
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.shape(), (xv.rows(), 1), "row-scale shape mismatch");
        let c = xv.cols();
        let mut value = xv.clone();
        for (row, &f) in value.data_mut().chunks_mut(c.max(1)).zip(sv.data()) {
            for v in row {
                *v *= f;
            }
        }
        let rg = self.rg(&[x, s]);
        self.push(value, Op::MulCol(x, s), rg)
    }

    /// `x · s` with `s` a `1×1` node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let f = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * f);
        let rg = self.rg(&[x, s]);
        self.push(value, Op::ScaleBy(x, s), rg)
    }

    /// `x + s` with `s` a `1×1` node.
    pub fn shift_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let f = self.value(s).data()[0];
        let value = self.value(x).map(|v| v + f);
        let rg = self.rg(&[x, s]);
        self.push(value, Op::ShiftBy(x, s), rg)
    }

    pub fn unary(&mut self, x: Var, op: Unary) -> Var {
        let value = self.value(x).map(|v| op.apply(v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary(x, op), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.unary(x, Unary::Affine(a, 0.0))
    }

    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        self.unary(x, Unary::Affine(a, b))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let data: Vec<f64> = xv.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let value = Tensor::from_vec(xv.rows(), 1, data);
        let rg = self.rg(&[x]);
        self.push(value, Op::RowSum(x), rg)
    }

    pub fn row_mean(&mut self, x: Var) -> Var {
        let c = self.shape(x).1 as f64;
        let s = self.row_sum(x);
        self.scale(s, 1.0 / c)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(x).clone().reshaped(rows, cols);
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice_cols(start, end);
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceCols(x, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let value = {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&refs)
        };
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let value = {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_rows(&refs)
        };
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Scaled dot-product multi-head self-attention.
    ///
    /// `qkv` is `(g·t)×3c`, laid out as `[Q | K | V]` per row; attention is
    /// computed independently inside each group of `tokens` consecutive rows.
    /// Returns the concatenated head outputs, `(g·t)×c`.
    pub fn attention(&mut self, qkv: Var, tokens: usize, heads: usize) -> Var {
        let qv = self.value(qkv);
        let (n, c3) = qv.shape();
        assert_eq!(c3 % 3, 0, "qkv width must be a multiple of 3");
        let c = c3 / 3;
        assert!(heads > 0 && c % heads == 0, "width {c} not divisible by {heads} heads");
        assert_eq!(n % tokens, 0, "rows not a multiple of the token count");
        let groups = n / tokens;
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let pp = heads * tokens * tokens;

        let mut out = vec![0.0; n * c];
        let mut probs = vec![0.0; groups * pp];
        {
            let q = qv.data();
            // Each group owns a contiguous slab of output rows and probabilities.
            let mut pairs: Vec<(&mut [f64], &mut [f64])> =
                out.chunks_mut(tokens * c).zip(probs.chunks_mut(pp)).collect();
            let work = |gi: usize, o: &mut [f64], p: &mut [f64]| {
                let base = gi * tokens;
                for h in 0..heads {
                    let ph = &mut p[h * tokens * tokens..(h + 1) * tokens * tokens];
                    for i in 0..tokens {
                        let qi = &q[(base + i) * c3 + h * dh..(base + i) * c3 + (h + 1) * dh];
                        let row = &mut ph[i * tokens..(i + 1) * tokens];
                        let mut mx = f64::NEG_INFINITY;
                        for j in 0..tokens {
                            let kj = &q[(base + j) * c3 + c + h * dh..(base + j) * c3 + c + (h + 1) * dh];
                            let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                            row[j] = s;
                            mx = mx.max(s);
                        }
                        let mut z = 0.0;
                        for v in row.iter_mut() {
                            *v = (*v - mx).exp();
                            z += *v;
                        }
                        for v in row.iter_mut() {
                            *v /= z;
                        }
                        let oi = &mut o[i * c + h * dh..i * c + (h + 1) * dh];
                        for j in 0..tokens {
                            let w = row[j];
                            let vj = &q[(base + j) * c3 + 2 * c + h * dh..(base + j) * c3 + 2 * c + (h + 1) * dh];
                            for (a, b) in oi.iter_mut().zip(vj) {
                                *a += w * b;
                            }
                        }
                    }
                }
            };
            run_groups(self.exec, &mut pairs, work);
        }
        let value = Tensor::from_vec(n, c, out);
        let rg = self.rg(&[qkv]);
        self.push(value, Op::Attention { qkv, tokens, heads, probs }, rg)
    }

    /// Row-wise layer normalization with learned gain and bias (`1×c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(n, c, out);
        let rg = self.rg(&[x, gain, bias]);
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    /// Multiplies row `i` of an interleaved complex matrix (`n×2m`, pairs of
    /// (re, im)) by the complex constant `coeffs[i]`.
    pub fn complex_scale_rows(&mut self, x: Var, coeffs: Vec<(f64, f64)>) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        assert_eq!(coeffs.len(), n, "one coefficient per row");
        assert_eq!(c % 2, 0, "interleaved complex rows need an even width");
        let mut value = xv.clone();
        for (row, &(cr, ci)) in value.data_mut().chunks_mut(c.max(1)).zip(&coeffs) {
            for pair in row.chunks_mut(2) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = cr * a - ci * b;
                pair[1] = cr * b + ci * a;
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::ComplexScaleRows(x, coeffs), rg)
    }

    /// `max(x, floor)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| v.max(floor));
        let rg = self.rg(&[x]);
        self.push(value, Op::ClampMin(x, floor), rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let bv = self.value(*b);
                    let mut da = Tensor::zeros(self.value(*a).rows(), self.value(*a).cols());
                    gemm(gout, false, bv, true, &mut da, 0.0);
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let av = self.value(*a);
                    let mut db = Tensor::zeros(self.value(*b).rows(), self.value(*b).cols());
                    gemm(av, true, gout, false, &mut db, 0.0);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, gout.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, gout.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, gout.zip_map(self.value(*b), |g, y| g * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, gout.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::AddRowBias(x, bias) => {
                if wants(*x) {
                    accumulate(grads, *x, gout.clone());
                }
                if wants(*bias) {
                    let c = gout.cols();
                    let mut db = vec![0.0; c];
                    for row in gout.data().chunks(c.max(1)) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *bias, Tensor::from_vec(1, c, db));
                }
            }
            Op::AddTiled(x, tile) => {
                if wants(*x) {
                    accumulate(grads, *x, gout.clone());
                }
                if wants(*tile) {
                    let (tr, tc) = self.shape(*tile);
                    let mut dt = vec![0.0; tr * tc];
                    for block in gout.data().chunks(tr * tc) {
                        for (d, g) in dt.iter_mut().zip(block) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *tile, Tensor::from_vec(tr, tc, dt));
                }
            }
            Op::MulCol(x, s) => {
                let c = gout.cols().max(1);
                if wants(*x) {
                    let sv = self.value(*s).data();
                    let mut dx = gout.clone();
                    for (row, &f) in dx.data_mut().chunks_mut(c).zip(sv) {
                        for v in row {
                            *v *= f;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*s) {
                    let xv = self.value(*x).data();
                    let ds: Vec<f64> = gout
                        .data()
                        .chunks(c)
                        .zip(xv.chunks(c))
                        .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, *s, Tensor::from_vec(ds.len(), 1, ds));
                }
            }
            Op::ScaleBy(x, s) => {
                let f = self.value(*s).data()[0];
                if wants(*x) {
                    accumulate(grads, *x, gout.map(|g| g * f));
                }
                if wants(*s) {
                    let d: f64 = gout.data().iter().zip(self.value(*x).data()).map(|(g, v)| g * v).sum();
                    accumulate(grads, *s, Tensor::scalar(d));
                }
            }
            Op::ShiftBy(x, s) => {
                if wants(*x) {
                    accumulate(grads, *x, gout.clone());
                }
                if wants(*s) {
                    accumulate(grads, *s, Tensor::scalar(gout.sum()));
                }
            }
            Op::Unary(x, op) => {
                let xv = self.value(*x);
                let yv = &node.value;
                let mut dx = gout.clone();
                for ((d, &xi), &yi) in dx.data_mut().iter_mut().zip(xv.data()).zip(yv.data()) {
                    *d *= op.derivative(xi, yi);
                }
                accumulate(grads, *x, dx);
            }
            Op::RowSum(x) => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for (row, &g) in dx.data_mut().chunks_mut(c.max(1)).zip(gout.data()) {
                    row.iter_mut().for_each(|v| *v = g);
                }
                accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                accumulate(grads, *x, Tensor::filled(r, c, gout.data()[0]));
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                accumulate(grads, *x, gout.clone().reshaped(r, c));
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.shape(*x);
                let w = gout.cols();
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    dx.data_mut()[i * c + start..i * c + start + w].copy_from_slice(gout.row(i));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if wants(p) {
                        accumulate(grads, p, gout.slice_cols(off, off + w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if wants(p) {
                        accumulate(grads, p, gout.slice_rows(off, off + h));
                    }
                    off += h;
                }
            }
            Op::Attention { qkv, tokens, heads, probs } => {
                let dq = attention_backward(self.exec, self.value(*qkv), gout, probs, *tokens, *heads);
                accumulate(grads, *qkv, dq);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (n, c) = gout.shape();
                let g = self.value(*gain).data();
                if wants(*gain) {
                    let mut dg = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            dg[j] += gout.data()[r * c + j] * xhat[r * c + j];
                        }
                    }
                    accumulate(grads, *gain, Tensor::from_vec(1, c, dg));
                }
                if wants(*bias) {
                    let mut db = vec![0.0; c];
                    for row in gout.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, Tensor::from_vec(1, c, db));
                }
                if wants(*x) {
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n {
                        let dy = &gout.data()[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let d = dy[j] * g[j];
                            m1 += d;
                            m2 += d * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            dx[r * c + j] = inv_std[r] * (dy[j] * g[j] - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(n, c, dx));
                }
            }
            Op::ComplexScaleRows(x, coeffs) => {
                // Adjoint of multiplication by c is multiplication by conj(c).
                let c = gout.cols().max(1);
                let mut dx = gout.clone();
                for (row, &(cr, ci)) in dx.data_mut().chunks_mut(c).zip(coeffs) {
                    for pair in row.chunks_mut(2) {
                        let (a, b) = (pair[0], pair[1]);
                        pair[0] = cr * a + ci * b;
                        pair[1] = cr * b - ci * a;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ClampMin(x, floor) => {
                let dx = gout.zip_map(self.value(*x), |g, v| if v > *floor { g } else { 0.0 });
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn run_groups<F>(exec: Execution, pairs: &mut [(&mut [f64], &mut [f64])], work: F)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
{
    par::for_each_chunk_mut(exec, pairs, 1, |gi, chunk| {
        let (o, p) = &mut chunk[0];
        work(gi, o, p);
    });
}

fn attention_backward(
    exec: Execution,
    qkv: &Tensor,
    gout: &Tensor,
    probs: &[f64],
    tokens: usize,
    heads: usize,
) -> Tensor {
    let (n, c3) = qkv.shape();
    let c = c3 / 3;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let pp = heads * tokens * tokens;
    let q = qkv.data();
    let go = gout.data();
    let mut dqkv = vec![0.0; n * c3];

    par::for_each_chunk_mut(exec, &mut dqkv, tokens * c3, |gi, d| {
        let base = gi * tokens;
        let p = &probs[gi * pp..(gi + 1) * pp];
        let mut dp = vec![0.0; tokens];
        for h in 0..heads {
            let ph = &p[h * tokens * tokens..(h + 1) * tokens * tokens];
            for i in 0..tokens {
                let goi = &go[(base + i) * c + h * dh..(base + i) * c + (h + 1) * dh];
                let pi = &ph[i * tokens..(i + 1) * tokens];
                // dV_j += P_ij dO_i ; dP_ij = dO_i · V_j
                for j in 0..tokens {
                    let vj = &q[(base + j) * c3 + 2 * c + h * dh..(base + j) * c3 + 2 * c + (h + 1) * dh];
                    dp[j] = goi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let dvj = &mut d[j * c3 + 2 * c + h * dh..j * c3 + 2 * c + (h + 1) * dh];
                    for (dv, g) in dvj.iter_mut().zip(goi) {
                        *dv += pi[j] * g;
                    }
                }
                let dot: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..tokens {
                    let ds = pi[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &q[(base + j) * c3 + c + h * dh..(base + j) * c3 + c + (h + 1) * dh];
                    let qi = &q[(base + i) * c3 + h * dh..(base + i) * c3 + (h + 1) * dh];
                    for (dq, k) in d[i * c3 + h * dh..i * c3 + (h + 1) * dh].iter_mut().zip(kj) {
                        *dq += ds * k;
                    }
                    for (dk, q) in d[j * c3 + c + h * dh..j * c3 + c + (h + 1) * dh].iter_mut().zip(qi) {
                        *dk += ds * q;
                    }
                }
            }
        }
    });
    Tensor::from_vec(n, c3, dqkv)
}
