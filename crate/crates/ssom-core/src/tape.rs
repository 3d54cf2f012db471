//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! One tape lives for one training step. Leaves are inserted for every
//! parameter and input, the forward graph is recorded op by op, and
//! `backward` walks the tape once in reverse. All reductions run in a fixed
//! left-to-right order so forward results are bitwise reproducible.

use std::cell::RefCell;

use crate::error::{Result, SsomError};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Id, Id),
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, f64),
    AddRowBroadcast(Id, Id),
    ScaleRows(Id, Id),
    Sigmoid(Id),
    Gelu(Id),
    Log(Id),
    Clamp(Id, f64, f64),
    Transpose(Id),
    Sum(Id),
    Mean(Id),
    DivScalar(Id, Id),
    FrobeniusNormSq(Id),
    SoftmaxRows(Id),
    LayerNormRows(Id, Id, Id),
    PatchUnfold(Id, usize, usize),
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

impl Node {
    fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }
    fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.values.len(),
        }
    }
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Id {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
            grad: vec![0.0; t.len()],
            requires_grad,
            op: Op::Leaf,
        });
        Id(nodes.len() - 1)
    }

    pub fn value(&self, id: Id) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[id.0];
        Tensor::new(n.shape.clone(), n.values.clone()).expect("tape node holds a valid tensor")
    }

    pub fn shape(&self, id: Id) -> Vec<usize> {
        self.nodes.borrow()[id.0].shape.clone()
    }

    /// Accumulated gradient for a node; None for non-grad nodes.
    pub fn grad(&self, id: Id) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[id.0];
        if !n.requires_grad {
            return None;
        }
        Some(Tensor::new(n.shape.clone(), n.grad.clone()).expect("grad matches node shape"))
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op, op_name: &'static str) -> Result<Id> {
        // Fail-fast NaN/Inf policy: surface divergence at the op that caused it.
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(SsomError::NonFinite { op: op_name, index: i });
            }
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            let dep = |id: &Id| nodes[id.0].requires_grad;
            match &op {
                Op::Leaf => false,
                Op::MatMul(a, b)
                | Op::Add(a, b)
                | Op::Sub(a, b)
                | Op::Mul(a, b)
                | Op::AddRowBroadcast(a, b)
                | Op::ScaleRows(a, b)
                | Op::DivScalar(a, b) => dep(a) || dep(b),
                Op::Scale(a, _)
                | Op::Sigmoid(a)
                | Op::Gelu(a)
                | Op::Log(a)
                | Op::Clamp(a, _, _)
                | Op::Transpose(a)
                | Op::Sum(a)
                | Op::Mean(a)
                | Op::FrobeniusNormSq(a)
                | Op::SoftmaxRows(a)
                | Op::PatchUnfold(a, _, _) => dep(a),
                Op::LayerNormRows(a, g, b) => dep(a) || dep(g) || dep(b),
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        let len = values.len();
        nodes.push(Node {
            shape,
            values,
            grad: vec![0.0; len],
            requires_grad,
            op,
        });
        Ok(Id(nodes.len() - 1))
    }

    fn dims2(&self, id: Id) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[id.0].rows(), nodes[id.0].cols())
    }

    pub fn matmul(&self, a: Id, b: Id) -> Result<Id> {
        let (m, n) = self.dims2(a);
        let (n2, p) = self.dims2(b);
        if n != n2 {
            return Err(SsomError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            matmul_raw(&nodes[a.0].values, &nodes[b.0].values, m, n, p)
        };
        self.push(vec![m, p], out, Op::MatMul(a, b), "matmul")
    }

    fn binary_elementwise(
        &self,
        a: Id,
        b: Id,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Id> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(SsomError::ShapeMismatch {
                op: op_name,
                left: sa,
                right: sb,
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .values
                .iter()
                .zip(&nodes[b.0].values)
                .map(|(x, y)| f(*x, *y))
                .collect()
        };
        self.push(sa, out, op, op_name)
    }

    pub fn add(&self, a: Id, b: Id) -> Result<Id> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Id, b: Id) -> Result<Id> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Id, b: Id) -> Result<Id> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Id, c: f64) -> Result<Id> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].values.iter().map(|x| x * c).collect()
        };
        self.push(self.shape(a), out, Op::Scale(a, c), "scale")
    }

    /// a[m×n] + v broadcast over rows (v has length n).
    pub fn add_row_broadcast(&self, a: Id, v: Id) -> Result<Id> {
        let (m, n) = self.dims2(a);
        let vlen = self.nodes.borrow()[v.0].values.len();
        if vlen != n {
            return Err(SsomError::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.shape(a),
                right: self.shape(v),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].values;
            let vv = &nodes[v.0].values;
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(av[i * n + j] + vv[j]);
                }
            }
            out
        };
        self.push(vec![m, n], out, Op::AddRowBroadcast(a, v), "add_row_broadcast")
    }

    /// Row i of a[r×m] scaled by v[i]. Stands in for diag(v)·a without
    /// materializing the diagonal.
    pub fn scale_rows(&self, a: Id, v: Id) -> Result<Id> {
        let (r, m) = self.dims2(a);
        let vlen = self.nodes.borrow()[v.0].values.len();
        if vlen != r {
            return Err(SsomError::ShapeMismatch {
                op: "scale_rows",
                left: self.shape(a),
                right: self.shape(v),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].values;
            let vv = &nodes[v.0].values;
            let mut out = Vec::with_capacity(r * m);
            for i in 0..r {
                for j in 0..m {
                    out.push(av[i * m + j] * vv[i]);
                }
            }
            out
        };
        self.push(vec![r, m], out, Op::ScaleRows(a, v), "scale_rows")
    }

    pub fn sigmoid(&self, a: Id) -> Result<Id> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].values.iter().map(|x| sigmoid(*x)).collect()
        };
        self.push(self.shape(a), out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn gelu(&self, a: Id) -> Result<Id> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].values.iter().map(|x| gelu(*x)).collect()
        };
        self.push(self.shape(a), out, Op::Gelu(a), "gelu")
    }

    pub fn log(&self, a: Id) -> Result<Id> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].values.iter().map(|x| x.ln()).collect()
        };
        self.push(self.shape(a), out, Op::Log(a), "log")
    }

    pub fn clamp(&self, a: Id, lo: f64, hi: f64) -> Result<Id> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].values.iter().map(|x| x.clamp(lo, hi)).collect()
        };
        self.push(self.shape(a), out, Op::Clamp(a, lo, hi), "clamp")
    }

    pub fn transpose(&self, a: Id) -> Result<Id> {
        let (m, n) = self.dims2(a);
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].values;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = av[i * n + j];
                }
            }
            out
        };
        self.push(vec![n, m], out, Op::Transpose(a), "transpose")
    }

    pub fn sum(&self, a: Id) -> Result<Id> {
        let out = {
            let nodes = self.nodes.borrow();
            seq_sum(&nodes[a.0].values)
        };
        self.push(vec![1], vec![out], Op::Sum(a), "sum")
    }

    pub fn mean(&self, a: Id) -> Result<Id> {
        let (s, n) = {
            let nodes = self.nodes.borrow();
            (seq_sum(&nodes[a.0].values), nodes[a.0].values.len())
        };
        self.push(vec![1], vec![s / n as f64], Op::Mean(a), "mean")
    }

    /// Scalar quotient a / b.
    pub fn div_scalar(&self, a: Id, b: Id) -> Result<Id> {
        let (av, bv) = {
            let nodes = self.nodes.borrow();
            if nodes[a.0].values.len() != 1 || nodes[b.0].values.len() != 1 {
                return Err(SsomError::ShapeMismatch {
                    op: "div_scalar",
                    left: nodes[a.0].shape.clone(),
                    right: nodes[b.0].shape.clone(),
                });
            }
            (nodes[a.0].values[0], nodes[b.0].values[0])
        };
        self.push(vec![1], vec![av / bv], Op::DivScalar(a, b), "div_scalar")
    }

    pub fn frobenius_norm_sq(&self, a: Id) -> Result<Id> {
        let out = {
            let nodes = self.nodes.borrow();
            let mut acc = 0.0;
            for v in &nodes[a.0].values {
                acc += v * v;
            }
            acc
        };
        self.push(vec![1], vec![out], Op::FrobeniusNormSq(a), "frobenius_norm_sq")
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self, a: Id) -> Result<Id> {
        let (m, n) = self.dims2(a);
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].values;
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let row = &av[i * n..(i + 1) * n];
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
                let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
                let z = seq_sum(&exps);
                out.extend(exps.iter().map(|e| e / z));
            }
            out
        };
        self.push(self.shape(a), out, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Per-row layer norm of x[m×n] with elementwise gain and bias (length n).
    pub fn layer_norm_rows(&self, x: Id, gain: Id, bias: Id) -> Result<Id> {
        let (m, n) = self.dims2(x);
        let glen = self.nodes.borrow()[gain.0].values.len();
        let blen = self.nodes.borrow()[bias.0].values.len();
        if glen != n || blen != n {
            return Err(SsomError::ShapeMismatch {
                op: "layer_norm_rows",
                left: self.shape(x),
                right: vec![glen, blen],
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].values;
            let gv = &nodes[gain.0].values;
            let bv = &nodes[bias.0].values;
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mu = seq_sum(row) / n as f64;
                let mut var = 0.0;
                for v in row {
                    let d = v - mu;
                    var += d * d;
                }
                var /= n as f64;
                let inv_sigma = 1.0 / (var + LN_EPS).sqrt();
                for j in 0..n {
                    let xh = (row[j] - mu) * inv_sigma;
                    out.push(gv[j] * xh + bv[j]);
                }
            }
            out
        };
        self.push(vec![m, n], out, Op::LayerNormRows(x, gain, bias), "layer_norm_rows")
    }

    /// Rearranges per-patch pixel logits [grid²×p²] into the full [H×W]
    /// raster, patches in raster order.
    pub fn patch_unfold(&self, a: Id, grid: usize, p: usize) -> Result<Id> {
        let (k, pp) = self.dims2(a);
        if k != grid * grid || pp != p * p {
            return Err(SsomError::Dimension {
                op: "patch_unfold",
                got: self.shape(a),
                expected: format!("[{}, {}]", grid * grid, p * p),
            });
        }
        let side = grid * p;
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].values;
            let mut out = vec![0.0; side * side];
            for patch in 0..k {
                let (pr, pc) = (patch / grid, patch % grid);
                for q in 0..pp {
                    let (qr, qc) = (q / p, q % p);
                    out[(pr * p + qr) * side + (pc * p + qc)] = av[patch * pp + q];
                }
            }
            out
        };
        self.push(vec![side, side], out, Op::PatchUnfold(a, grid, p), "patch_unfold")
    }

    /// Reverse sweep from a scalar loss. Repeated calls accumulate into the
    /// same grad buffers.
    pub fn backward(&self, loss: Id) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].values.len() != 1 {
            return Err(SsomError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        nodes[loss.0].grad[0] += 1.0;
        for idx in (0..=loss.0).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let op = nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, n) = (nodes[a.0].rows(), nodes[a.0].cols());
                    let p = nodes[b.0].cols();
                    let g = nodes[idx].grad.clone();
                    if nodes[a.0].requires_grad {
                        // da = g · bᵀ
                        let bv = nodes[b.0].values.clone();
                        let da = matmul_nt(&g, &bv, m, p, n);
                        accumulate(&mut nodes[a.0].grad, &da);
                    }
                    if nodes[b.0].requires_grad {
                        // db = aᵀ · g
                        let av = nodes[a.0].values.clone();
                        let db = matmul_tn(&av, &g, m, n, p);
                        accumulate(&mut nodes[b.0].grad, &db);
                    }
                }
                Op::Add(a, b) => {
                    let g = nodes[idx].grad.clone();
                    if nodes[a.0].requires_grad {
                        accumulate(&mut nodes[a.0].grad, &g);
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut nodes[b.0].grad, &g);
                    }
                }
                Op::Sub(a, b) => {
                    let g = nodes[idx].grad.clone();
                    if nodes[a.0].requires_grad {
                        accumulate(&mut nodes[a.0].grad, &g);
                    }
                    if nodes[b.0].requires_grad {
                        for (d, s) in nodes[b.0].grad.iter_mut().zip(&g) {
                            *d -= s;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let g = nodes[idx].grad.clone();
                    if nodes[a.0].requires_grad {
                        let bv = nodes[b.0].values.clone();
                        for ((d, s), x) in nodes[a.0].grad.iter_mut().zip(&g).zip(&bv) {
                            *d += s * x;
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let av = nodes[a.0].values.clone();
                        for ((d, s), x) in nodes[b.0].grad.iter_mut().zip(&g).zip(&av) {
                            *d += s * x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if nodes[a.0].requires_grad {
                        let g = nodes[idx].grad.clone();
                        for (d, s) in nodes[a.0].grad.iter_mut().zip(&g) {
                            *d += c * s;
                        }
                    }
                }
                Op::AddRowBroadcast(a, v) => {
                    let (m, n) = (nodes[a.0].rows(), nodes[a.0].cols());
                    let g = nodes[idx].grad.clone();
                    if nodes[a.0].requires_grad {
                        accumulate(&mut nodes[a.0].grad, &g);
                    }
                    if nodes[v.0].requires_grad {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += g[i * n + j];
                            }
                            nodes[v.0].grad[j] += acc;
                        }
                    }
                }
                Op::ScaleRows(a, v) => {
                    let (r, m) = (nodes[a.0].rows(), nodes[a.0].cols());
                    let g = nodes[idx].grad.clone();
                    if nodes[a.0].requires_grad {
                        let vv = nodes[v.0].values.clone();
                        for i in 0..r {
                            for j in 0..m {
                                nodes[a.0].grad[i * m + j] += g[i * m + j] * vv[i];
                            }
                        }
                    }
                    if nodes[v.0].requires_grad {
                        let av = nodes[a.0].values.clone();
                        for i in 0..r {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g[i * m + j] * av[i * m + j];
                            }
                            nodes[v.0].grad[i] += acc;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if nodes[a.0].requires_grad {
                        let g = nodes[idx].grad.clone();
                        let sv = nodes[idx].values.clone();
                        for ((d, gi), s) in nodes[a.0].grad.iter_mut().zip(&g).zip(&sv) {
                            *d += gi * s * (1.0 - s);
                        }
                    }
                }
                Op::Gelu(a) => {
                    if nodes[a.0].requires_grad {
                        let g = nodes[idx].grad.clone();
                        let xv = nodes[a.0].values.clone();
                        for ((d, gi), x) in nodes[a.0].grad.iter_mut().zip(&g).zip(&xv) {
                            *d += gi * gelu_grad(*x);
                        }
                    }
                }
                Op::Log(a) => {
                    if nodes[a.0].requires_grad {
                        let g = nodes[idx].grad.clone();
                        let xv = nodes[a.0].values.clone();
                        for ((d, gi), x) in nodes[a.0].grad.iter_mut().zip(&g).zip(&xv) {
                            *d += gi / x;
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    if nodes[a.0].requires_grad {
                        let g = nodes[idx].grad.clone();
                        let xv = nodes[a.0].values.clone();
                        for ((d, gi), x) in nodes[a.0].grad.iter_mut().zip(&g).zip(&xv) {
                            if *x >= lo && *x <= hi {
                                *d += gi;
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    if nodes[a.0].requires_grad {
                        let (m, n) = (nodes[a.0].rows(), nodes[a.0].cols());
                        let g = nodes[idx].grad.clone(); // shape n×m
                        for i in 0..m {
                            for j in 0..n {
                                nodes[a.0].grad[i * n + j] += g[j * m + i];
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if nodes[a.0].requires_grad {
                        let g = nodes[idx].grad[0];
                        for d in nodes[a.0].grad.iter_mut() {
                            *d += g;
                        }
                    }
                }
                Op::Mean(a) => {
                    if nodes[a.0].requires_grad {
                        let n = nodes[a.0].values.len() as f64;
                        let g = nodes[idx].grad[0] / n;
                        for d in nodes[a.0].grad.iter_mut() {
                            *d += g;
                        }
                    }
                }
                Op::DivScalar(a, b) => {
                    let g = nodes[idx].grad[0];
                    let av = nodes[a.0].values[0];
                    let bv = nodes[b.0].values[0];
                    if nodes[a.0].requires_grad {
                        nodes[a.0].grad[0] += g / bv;
                    }
                    if nodes[b.0].requires_grad {
                        nodes[b.0].grad[0] -= g * av / (bv * bv);
                    }
                }
                Op::FrobeniusNormSq(a) => {
                    if nodes[a.0].requires_grad {
                        let g = nodes[idx].grad[0];
                        let xv = nodes[a.0].values.clone();
                        for (d, x) in nodes[a.0].grad.iter_mut().zip(&xv) {
                            *d += 2.0 * g * x;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    if nodes[a.0].requires_grad {
                        let (m, n) = (nodes[a.0].rows(), nodes[a.0].cols());
                        let g = nodes[idx].grad.clone();
                        let sv = nodes[idx].values.clone();
                        for i in 0..m {
                            let row = i * n;
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += g[row + j] * sv[row + j];
                            }
                            for j in 0..n {
                                nodes[a.0].grad[row + j] += sv[row + j] * (g[row + j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNormRows(x, gain, bias) => {
                    let (m, n) = (nodes[x.0].rows(), nodes[x.0].cols());
                    let g = nodes[idx].grad.clone();
                    let xv = nodes[x.0].values.clone();
                    let gv = nodes[gain.0].values.clone();
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let mu = seq_sum(row) / n as f64;
                        let mut var = 0.0;
                        for v in row {
                            let d = v - mu;
                            var += d * d;
                        }
                        var /= n as f64;
                        let inv_sigma = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv_sigma).collect();
                        let gr = &g[i * n..(i + 1) * n];
                        if nodes[gain.0].requires_grad {
                            for j in 0..n {
                                nodes[gain.0].grad[j] += gr[j] * xhat[j];
                            }
                        }
                        if nodes[bias.0].requires_grad {
                            for j in 0..n {
                                nodes[bias.0].grad[j] += gr[j];
                            }
                        }
                        if nodes[x.0].requires_grad {
                            let gy: Vec<f64> = (0..n).map(|j| gr[j] * gv[j]).collect();
                            let mean_gy = seq_sum(&gy) / n as f64;
                            let mut mean_gy_xhat = 0.0;
                            for j in 0..n {
                                mean_gy_xhat += gy[j] * xhat[j];
                            }
                            mean_gy_xhat /= n as f64;
                            for j in 0..n {
                                nodes[x.0].grad[i * n + j] +=
                                    inv_sigma * (gy[j] - mean_gy - xhat[j] * mean_gy_xhat);
                            }
                        }
                    }
                }
                Op::PatchUnfold(a, grid, p) => {
                    if nodes[a.0].requires_grad {
                        let g = nodes[idx].grad.clone();
                        let pp = p * p;
                        let side = grid * p;
                        for patch in 0..grid * grid {
                            let (pr, pc) = (patch / grid, patch % grid);
                            for q in 0..pp {
                                let (qr, qc) = (q / p, q % p);
                                nodes[a.0].grad[patch * pp + q] +=
                                    g[(pr * p + qr) * side + (pc * p + qc)];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Fixed left-to-right summation.
fn seq_sum(xs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in xs {
        acc += x;
    }
    acc
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// C[m×p] = A[m×n]·B[n×p], ikj loop order, sequential accumulation.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            let crow = &mut c[i * p..(i + 1) * p];
            for j in 0..p {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// A[m×p] · Bᵀ where B is [n×p] → [m×n].
fn matmul_nt(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..p {
                acc += a[i * p + k] * b[j * p + k];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Aᵀ · B where A is [m×n], B is [m×p] → [n×p].
fn matmul_tn(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * p];
    for k in 0..m {
        for i in 0..n {
            let aki = a[k * n + i];
            if aki == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            let crow = &mut c[i * p..(i + 1) * p];
            for j in 0..p {
                crow[j] += aki * brow[j];
            }
        }
    }
    c
}
