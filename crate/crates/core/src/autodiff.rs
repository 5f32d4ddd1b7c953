//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are either
//! parameters (borrowed from the parameter store, optionally tracked) or
//! constants. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar (1×1) node with respect to every tracked node.
//!
//! Nodes that do not depend on any tracked leaf are never visited during the
//! backward sweep, so frozen sub-graphs cost nothing beyond their forward.

use crate::tensor::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel 2-D convolution lowered to im2col.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the lowered patch matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

enum Value<'a> {
    Owned(Matrix),
    Borrowed(&'a Matrix),
}

impl Value<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    SampleNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: f64 },
    SoftmaxRows(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Im2Col(Var, ConvGeom),
    SumAbs(Var),
    SumSq(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    tracked: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const SAMPLE_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Sign pattern of every ReLU and L1 input. Between two points with equal
    /// patterns the graph is smooth.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::SumAbs(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.nodes[v.0].value.get()
    }

    /// Leaf borrowed from a parameter store; `track` requests its gradient.
    pub fn param(&mut self, m: &'a Matrix, track: bool) -> Var {
        self.nodes.push(Node { value: Value::Borrowed(m), op: Op::Leaf, tracked: track });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn tracked_leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMulT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), t)
    }

    /// Sum of several same-shaped nodes, left to right.
    pub fn add_all(&mut self, items: &[Var]) -> Var {
        let mut acc = items[0];
        for &v in &items[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn mean_of(&mut self, items: &[Var]) -> Var {
        let s = self.add_all(items);
        if items.len() == 1 {
            s
        } else {
            self.scale(s, 1.0 / items.len() as f64)
        }
    }

    /// Adds a `1×C` row to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.rows(), 1);
        assert_eq!(bv.cols(), xv.cols());
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = self.tracked(x) || self.tracked(bias);
        self.push(out, Op::AddRowBias(x, bias), t)
    }

    /// `x·W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row_bias(xw, b)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).scale(k);
        let t = self.tracked(x);
        self.push(v, Op::Scale(x, k), t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        let t = self.tracked(x);
        self.push(v, Op::Relu(x), t)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let t = self.tracked(x);
        self.push(v, Op::Gelu(x), t)
    }

    /// Row-wise layer normalisation with `1×D` affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let d = xv.cols();
        assert_eq!(g.shape(), (1, d));
        assert_eq!(b.shape(), (1, d));
        let mut xhat = Matrix::zeros(xv.rows(), d);
        let mut out = Matrix::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[(r, c)] = h;
                out[(r, c)] = h * g.data()[c] + b.data()[c];
            }
        }
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(out, Op::LayerNormRows { x, gamma, beta, xhat, inv_std }, t)
    }

    /// Normalises a whole `C×P` feature map to zero mean / unit variance,
    /// then applies a per-channel (`C×1`) affine map.
    pub fn sample_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let c = xv.rows();
        assert_eq!(g.shape(), (c, 1));
        assert_eq!(b.shape(), (c, 1));
        let n = xv.len() as f64;
        let mean = xv.sum() / n;
        let var = xv.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + SAMPLE_NORM_EPS).sqrt();
        let xhat = xv.map(|v| (v - mean) * inv_std);
        let mut out = xhat.clone();
        for ch in 0..c {
            let (gc, bc) = (g.data()[ch], b.data()[ch]);
            for v in out.row_mut(ch) {
                *v = *v * gc + bc;
            }
        }
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(out, Op::SampleNorm { x, gamma, beta, xhat, inv_std }, t)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let t = self.tracked(x);
        self.push(out, Op::SoftmaxRows(x), t)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).rows_range(start, end);
        let t = self.tracked(x);
        self.push(v, Op::SliceRows(x, start), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&mats);
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).cols_range(start, end);
        let t = self.tracked(x);
        self.push(v, Op::SliceCols(x, start), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        let t = self.tracked(x);
        self.push(v, Op::Transpose(x), t)
    }

    /// Lowers a `C×(H·W)` map into a `(C·k·k)×(H'·W')` patch matrix.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let v = im2col(self.value(x), &geom);
        let t = self.tracked(x);
        self.push(v, Op::Im2Col(x, geom), t)
    }

    /// Convolution of a `C×(H·W)` map with a `C_out×(C·k·k)` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, geom: ConvGeom) -> Var {
        let cols = self.im2col(x, geom);
        self.matmul(kernel, cols)
    }

    /// Entrywise L1 norm, as a 1×1 node.
    pub fn sum_abs(&mut self, x: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(x).abs_sum());
        let t = self.tracked(x);
        self.push(v, Op::SumAbs(x), t)
    }

    /// Squared Frobenius norm, as a 1×1 node.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(x).frobenius_sq());
        let t = self.tracked(x);
        self.push(v, Op::SumSq(x), t)
    }

    /// `−log softmax(logits)[label]` for a `1×K` row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), 1);
        assert!(label < lv.cols());
        let lse = log_sum_exp(lv.data());
        let loss = lse - lv.data()[label];
        let probs = lv.data().iter().map(|&z| (z - lse).exp()).collect();
        let t = self.tracked(logits);
        self.push(Matrix::filled(1, 1, loss), Op::CrossEntropy { logits, label, probs }, t)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data()[0]
    }

    /// Gradients of the scalar node `loss` for every tracked node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).shape(), (1, 1), "backward requires a scalar loss");
        if !self.tracked(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.tracked(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.scale(*k)),
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad(xv));
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNormRows { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma);
                let d = xhat.cols();
                if self.tracked(*gamma) || self.tracked(*beta) {
                    let mut gg = Matrix::zeros(1, d);
                    let mut gbeta = Matrix::zeros(1, d);
                    for r in 0..g.rows() {
                        for c in 0..d {
                            gg.data_mut()[c] += g[(r, c)] * xhat[(r, c)];
                            gbeta.data_mut()[c] += g[(r, c)];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gbeta);
                }
                if self.tracked(*x) {
                    let mut gx = Matrix::zeros(g.rows(), d);
                    for r in 0..g.rows() {
                        let gh: Vec<f64> = (0..d).map(|c| g[(r, c)] * gam.data()[c]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghx = dot(&gh, xhat.row(r)) / d as f64;
                        for c in 0..d {
                            gx[(r, c)] = inv_std[r] * (gh[c] - mean_gh - xhat[(r, c)] * mean_ghx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SampleNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma);
                let (c, p) = xhat.shape();
                if self.tracked(*gamma) || self.tracked(*beta) {
                    let mut gg = Matrix::zeros(c, 1);
                    let mut gbeta = Matrix::zeros(c, 1);
                    for ch in 0..c {
                        gg.data_mut()[ch] = dot(g.row(ch), xhat.row(ch));
                        gbeta.data_mut()[ch] = g.row(ch).iter().sum();
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gbeta);
                }
                if self.tracked(*x) {
                    let n = (c * p) as f64;
                    let mut gh = g.clone();
                    for ch in 0..c {
                        let gc = gam.data()[ch];
                        for v in gh.row_mut(ch) {
                            *v *= gc;
                        }
                    }
                    let mean_gh = gh.sum() / n;
                    let mean_ghx = dot(gh.data(), xhat.data()) / n;
                    let gx = gh.zip_map(xhat, |a, h| inv_std * (a - mean_gh - h * mean_ghx));
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.get();
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for c in 0..y.cols() {
                        gx[(r, c)] = y[(r, c)] * (g[(r, c)] - s);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceRows(x, start) => {
                if self.tracked(*x) {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.tracked(p) {
                        self.accumulate(grads, p, g.rows_range(off, off + rows));
                    }
                    off += rows;
                }
            }
            Op::SliceCols(x, start) => {
                if self.tracked(*x) {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.tracked(p) {
                        self.accumulate(grads, p, g.cols_range(off, off + cols));
                    }
                    off += cols;
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Im2Col(x, geom) => {
                if self.tracked(*x) {
                    self.accumulate(grads, *x, col2im(g, geom));
                }
            }
            Op::SumAbs(x) => {
                let k = g.data()[0];
                let gx = self.value(*x).map(|v| k * sign(v));
                self.accumulate(grads, *x, gx);
            }
            Op::SumSq(x) => {
                let k = 2.0 * g.data()[0];
                let gx = self.value(*x).scale(k);
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let k = g.data()[0];
                let mut gl = Matrix::from_vec(1, probs.len(), probs.clone());
                gl.data_mut()[*label] -= 1.0;
                gl.scale_assign(k);
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Output positions `o` whose input tap `o·stride + k − pad` lies in `[0, len)`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    lo..hi.max(lo)
}

pub fn im2col(x: &Matrix, geom: &ConvGeom) -> Matrix {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (k, s, p) = (geom.kernel, geom.stride, geom.pad);
    assert_eq!(x.shape(), (geom.channels, geom.height * geom.width), "im2col input shape");
    let mut out = Matrix::zeros(geom.patch_len(), ho * wo);
    for c in 0..geom.channels {
        let plane = x.row(c);
        for ky in 0..k {
            let ys = valid_range(ho, geom.height, ky, s, p);
            for kx in 0..k {
                let xs = valid_range(wo, geom.width, kx, s, p);
                let row = out.row_mut((c * k + ky) * k + kx);
                for oy in ys.clone() {
                    let src = &plane[(oy * s + ky - p) * geom.width..];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for ox in xs.clone() {
                        dst[ox] = src[ox * s + kx - p];
                    }
                }
            }
        }
    }
    out
}

pub fn col2im(cols: &Matrix, geom: &ConvGeom) -> Matrix {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (k, s, p) = (geom.kernel, geom.stride, geom.pad);
    let mut out = Matrix::zeros(geom.channels, geom.height * geom.width);
    for c in 0..geom.channels {
        let plane = out.row_mut(c);
        for ky in 0..k {
            let ys = valid_range(ho, geom.height, ky, s, p);
            for kx in 0..k {
                let xs = valid_range(wo, geom.width, kx, s, p);
                let row = cols.row((c * k + ky) * k + kx);
                for oy in ys.clone() {
                    let dst = &mut plane[(oy * s + ky - p) * geom.width..];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for ox in xs.clone() {
                        dst[ox * s + kx - p] += src[ox];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(leaf) for a closure building the graph.
    fn check(build: impl for<'g> Fn(&mut Graph<'g>, Var) -> Var, x0: Matrix) {
        let mut g = Graph::new();
        let x = g.tracked_leaf(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Matrix::zeros(x0.rows(), x0.cols()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.tracked_leaf(xp);
                let l = build(&mut g, x);
                g.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {i}: analytic {a} vs fd {fd}");
        }
    }

    fn rand_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::randn(r, c, 1.0, &mut rng)
    }

    #[test]
    fn grad_matmul_chain() {
        let w = rand_matrix(3, 2, 1);
        let w2 = rand_matrix(4, 2, 2);
        check(
            move |g, x| {
                let wv = g.constant(w.clone());
                let w2v = g.constant(w2.clone());
                let y = g.matmul(x, wv);
                let z = g.matmul_t(y, w2v);
                let t = g.transpose(z);
                g.sum_sq(t)
            },
            rand_matrix(5, 3, 3),
        );
    }

    #[test]
    fn grad_layer_norm_softmax_gelu() {
        let gamma = rand_matrix(1, 4, 4);
        let beta = rand_matrix(1, 4, 5);
        check(
            move |g, x| {
                let gm = g.constant(gamma.clone());
                let bt = g.constant(beta.clone());
                let n = g.layer_norm_rows(x, gm, bt);
                let a = g.gelu(n);
                let s = g.softmax_rows(a);
                let k = g.constant(Matrix::from_fn(3, 4, |r, c| (r + 2 * c) as f64 * 0.3 - 1.0));
                let d = g.sub(s, k);
                g.sum_sq(d)
            },
            rand_matrix(3, 4, 6),
        );
    }

    #[test]
    fn grad_sample_norm_and_conv() {
        let geom = ConvGeom { channels: 2, height: 5, width: 4, kernel: 3, stride: 2, pad: 1 };
        let kern = rand_matrix(3, geom.patch_len(), 7);
        let gamma = rand_matrix(3, 1, 8);
        let beta = rand_matrix(3, 1, 9);
        check(
            move |g, x| {
                let k = g.constant(kern.clone());
                let y = g.conv2d(x, k, geom);
                let gm = g.constant(gamma.clone());
                let bt = g.constant(beta.clone());
                let n = g.sample_norm(y, gm, bt);
                let r = g.relu(n);
                g.sum_sq(r)
            },
            rand_matrix(2, 20, 10),
        );
    }

    #[test]
    fn grad_slices_concat_ce_abs() {
        check(
            |g, x| {
                let a = g.slice_rows(x, 1, 3);
                let b = g.slice_cols(x, 0, 2);
                let bt = g.transpose(b);
                let c = g.concat_rows(&[a, bt]);
                let d = g.concat_cols(&[c, c]);
                let l1 = g.sum_abs(d);
                let row = g.slice_rows(x, 0, 1);
                let ce = g.cross_entropy(row, 2);
                let bias = g.constant(Matrix::from_rows(&[&[0.5, -0.5, 1.0]]));
                let xb = g.add_row_bias(x, bias);
                let sq = g.sum_sq(xb);
                let tot = g.add_all(&[l1, ce, sq]);
                g.scale(tot, 0.5)
            },
            rand_matrix(3, 3, 11).add(&Matrix::filled(3, 3, 0.05)),
        );
    }

    #[test]
    fn cross_entropy_is_stable() {
        let mut g = Graph::new();
        let l = g.constant(Matrix::from_rows(&[&[1e3, -1e3]]));
        let ce = g.cross_entropy(l, 0);
        assert!(g.scalar(ce).abs() < 1e-12);
        let ce1 = g.cross_entropy(l, 1);
        assert!((g.scalar(ce1) - 2e3).abs() < 1e-9);
    }

    #[test]
    fn untracked_graph_has_no_gradients() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::filled(2, 2, 1.0));
        let s = g.sum_sq(a);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (h, w, k, stride, pad) in [(5, 7, 3, 2, 1), (8, 8, 3, 1, 1), (6, 5, 1, 2, 0), (4, 4, 3, 2, 2), (9, 3, 5, 3, 2)] {
            let geom = ConvGeom { channels: 2, height: h, width: w, kernel: k, stride, pad };
            let x = rand_matrix(2, h * w, 11);
            let cols = im2col(&x, &geom);
            let (ho, wo) = (geom.out_height(), geom.out_width());
            for c in 0..2 {
                for ky in 0..k {
                    for kx in 0..k {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                                let expect = if inside { x[(c, iy as usize * w + ix as usize)] } else { 0.0 };
                                assert_eq!(cols[((c * k + ky) * k + kx, oy * wo + ox)], expect);
                            }
                        }
                    }
                }
            }
            // col2im is the adjoint: <im2col(x), y> == <x, col2im(y)>.
            let y = rand_matrix(cols.rows(), cols.cols(), 12);
            let lhs = cols.zip_map(&y, |a, b| a * b).sum();
            let rhs = x.zip_map(&col2im(&y, &geom), |a, b| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
