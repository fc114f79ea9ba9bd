//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Nodes only ever refer to
//! earlier nodes, so the recorded graph is acyclic by construction.
//!
//! Shape errors inside primitive operations are programming errors and panic;
//! the public model-level entry points validate their inputs first.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::error::{ensure, Result};
use crate::spatial::KdTree;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Square,
    Sqrt,
    Abs,
    Exp,
    Log,
    Sin,
    Cos,
    Recip,
    Acos,
    Sigmoid,
    Relu,
    /// `ln(1 + e^{beta x}) / beta`
    Softplus(f64),
    /// Derivative of [`Unary::Softplus`], i.e. `sigmoid(beta x)`.
    SoftplusGrad(f64),
    LeakyRelu(f64),
    /// Derivative of [`Unary::LeakyRelu`]; piecewise constant.
    LeakyReluGrad(f64),
    Clamp(f64, f64),
    Scale(f64),
    AddConst(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Constant sparse matrix in compressed-row form.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { rows, cols, row_ptr, col_idx, values }
    }

    pub fn mul_dense(&self, a: &Tensor) -> Tensor {
        let m = a.cols();
        let mut out = vec![0.0; self.rows * m];
        for r in 0..self.rows {
            let dst = &mut out[r * m..(r + 1) * m];
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let src = a.row_slice(self.col_idx[p]);
                let w = self.values[p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        Tensor::from_raw(self.rows, m, out)
    }

    fn mul_transpose_dense(&self, g: &Tensor) -> Tensor {
        let m = g.cols();
        let mut out = vec![0.0; self.cols * m];
        for r in 0..self.rows {
            let src = g.row_slice(r);
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[p];
                let w = self.values[p];
                for (d, s) in out[c * m..(c + 1) * m].iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        Tensor::from_raw(self.cols, m, out)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Rc<Vec<usize>>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    SoftmaxRows(Var),
    PosEnc(Var, usize),
    QuatToRot(Var),
    RowMatVec(Var, Var),
    Chamfer { a: Var, b: Var, nn_ab: Vec<usize>, nn_ba: Vec<usize>, squared: bool },
    Sparse(Var, Rc<SparseMatrix>),
    Im2Col { input: Var, channels: usize, side: usize },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of primitive operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    names: Vec<(String, Var)>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named leaf (parameter or differentiable input).
    pub fn named(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name).and_then(|&v| self.get(v))
    }

    /// All named leaves that received a gradient.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.named) {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x
    } else {
        bx.exp().ln_1p() / beta
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let r = a.0.max(b.0);
    let c = a.1.max(b.1);
    assert!(
        (a.0 == r || a.0 == 1) && (b.0 == r || b.0 == 1) && (a.1 == c || a.1 == 1) && (b.1 == c || b.1 == 1),
        "cannot broadcast {a:?} with {b:?}"
    );
    (r, c)
}

/// Sums a full-size adjoint down to a (possibly broadcast) input shape.
fn reduce_to(g: Tensor, rows: usize, cols: usize) -> Tensor {
    if g.rows() == rows && g.cols() == cols {
        return g;
    }
    let (gr, gc) = (g.rows(), g.cols());
    let mut out = vec![0.0; rows * cols];
    for i in 0..gr {
        for j in 0..gc {
            out[(i % rows) * cols + (j % cols)] += g.data()[i * gc + j];
        }
    }
    Tensor::from_raw(rows, cols, out)
}

/// Rotation matrix (row-major) of a unit quaternion `(w, x, y, z)`.
pub fn quat_matrix(q: [f64; 4]) -> [f64; 9] {
    let [w, x, y, z] = q;
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// Partial derivatives of [`quat_matrix`] w.r.t. `(w, x, y, z)`.
fn quat_matrix_jacobian(q: [f64; 4]) -> [[f64; 9]; 4] {
    let [w, x, y, z] = q;
    let t = 2.0;
    [
        [0.0, -t * z, t * y, t * z, 0.0, -t * x, -t * y, t * x, 0.0],
        [0.0, t * y, t * z, t * y, -2.0 * t * x, -t * w, t * z, t * w, -2.0 * t * x],
        [-2.0 * t * y, t * x, t * w, t * x, 0.0, t * z, -t * w, t * z, -2.0 * t * y],
        [-2.0 * t * z, -t * w, t * x, t * w, -2.0 * t * z, t * y, t * x, t * y, 0.0],
    ]
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable named leaf: a parameter or an auto-decoded latent code.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.names.push((name.into(), v));
        v
    }

    /// Differentiable unnamed leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = ((ta.rows(), ta.cols()), (tb.rows(), tb.cols()));
        let (r, c) = broadcast_shape(sa, sb);
        let mut out = vec![0.0; r * c];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..r {
            for j in 0..c {
                let x = da[(i % sa.0) * sa.1 + (j % sa.1)];
                let y = db[(i % sb.0) * sb.1 + (j % sb.1)];
                out[i * c + j] = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                };
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_raw(r, c, out), Op::Binary(kind, a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Neg => Box::new(|x| -x),
            Unary::Square => Box::new(|x| x * x),
            Unary::Sqrt => Box::new(|x: f64| x.max(0.0).sqrt()),
            Unary::Abs => Box::new(f64::abs),
            Unary::Exp => Box::new(f64::exp),
            Unary::Log => Box::new(f64::ln),
            Unary::Sin => Box::new(f64::sin),
            Unary::Cos => Box::new(f64::cos),
            Unary::Recip => Box::new(|x| 1.0 / x),
            Unary::Acos => Box::new(|x: f64| x.clamp(-1.0, 1.0).acos()),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Relu => Box::new(|x: f64| x.max(0.0)),
            Unary::Softplus(b) => Box::new(move |x| softplus(x, b)),
            Unary::SoftplusGrad(b) => Box::new(move |x| sigmoid(b * x)),
            Unary::LeakyRelu(s) => Box::new(move |x| if x > 0.0 { x } else { s * x }),
            Unary::LeakyReluGrad(s) => Box::new(move |x| if x > 0.0 { 1.0 } else { s }),
            Unary::Clamp(lo, hi) => Box::new(move |x: f64| x.clamp(lo, hi)),
            Unary::Scale(c) => Box::new(move |x| c * x),
            Unary::AddConst(c) => Box::new(move |x| c + x),
        };
        let value = self.value(a).map(f);
        let ng = self.ng(&[a]) && !matches!(kind, Unary::LeakyReluGrad(_));
        self.push(value, Op::Unary(kind, a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddConst(c), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    /// Column concatenation. Single-row inputs are broadcast to the row count of
    /// the tallest input.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = parts.iter().map(|&p| self.value(p).rows()).max().expect("empty concat");
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = (t.rows(), t.cols());
            assert!(r == rows || r == 1, "concat row mismatch: {r} vs {rows}");
            for i in 0..rows {
                let src = t.row_slice(if r == 1 { 0 } else { i });
                out[i * cols + off..i * cols + off + c].copy_from_slice(src);
            }
            off += c;
        }
        let ng = self.ng(parts);
        self.push(Tensor::from_raw(rows, cols, out), Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        assert!(start < end && end <= c, "column slice {start}..{end} out of range for {c}");
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.row_slice(i)[start..end]);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::from_raw(r, w, out), Op::SliceCols(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(t.row_slice(i));
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::from_raw(idx.len(), c, out), Op::Gather(a, idx), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let r = t.rows();
        let out = (0..r).map(|i| t.row_slice(i).iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::from_raw(r, 1, out), Op::RowSum(a), ng)
    }

    /// Euclidean norm of each row, `n x 1`. `eps` is added under the root.
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let sq = self.square(a);
        let s = self.row_sum(sq);
        let s = self.add_const(s, eps);
        self.sqrt(s)
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.row_sum(p)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - m).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::from_raw(r, c, out), Op::SoftmaxRows(a), ng)
    }

    /// Fourier features `[x, sin(2^0 pi x), cos(2^0 pi x), ...]` per coordinate.
    pub fn positional_encode(&mut self, a: Var, order: usize) -> Var {
        let value = positional_encoding(self.value(a), order);
        let ng = self.ng(&[a]);
        self.push(value, Op::PosEnc(a, order), ng)
    }

    /// Rows of `(w, x, y, z)` quaternions to row-major rotation matrices (`K x 9`).
    /// Quaternions are normalized first.
    pub fn quat_to_rotation(&mut self, q: Var) -> Var {
        let t = self.value(q);
        assert_eq!(t.cols(), 4, "quaternion rows need 4 columns");
        let mut out = Vec::with_capacity(t.rows() * 9);
        for i in 0..t.rows() {
            let r = t.row_slice(i);
            let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt().max(1e-12);
            out.extend_from_slice(&quat_matrix([r[0] / n, r[1] / n, r[2] / n, r[3] / n]));
        }
        let ng = self.ng(&[q]);
        self.push(Tensor::from_raw(t.rows(), 9, out), Op::QuatToRot(q), ng)
    }

    /// Per-row `3x3` matrix (row-major, `n x 9`) times vector (`n x 3`).
    pub fn row_mat_vec(&mut self, m: Var, v: Var) -> Var {
        let (tm, tv) = (self.value(m), self.value(v));
        assert_eq!(tm.cols(), 9);
        assert_eq!(tv.cols(), 3);
        assert_eq!(tm.rows(), tv.rows());
        let n = tm.rows();
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            let a = tm.row_slice(i);
            let x = tv.row_slice(i);
            for r in 0..3 {
                out[i * 3 + r] = a[r * 3] * x[0] + a[r * 3 + 1] * x[1] + a[r * 3 + 2] * x[2];
            }
        }
        let ng = self.ng(&[m, v]);
        self.push(Tensor::from_raw(n, 3, out), Op::RowMatVec(m, v), ng)
    }

    /// Bidirectional chamfer term between two `n x 3` point sets, each direction
    /// averaged over its source set. `squared` selects squared or plain distances.
    pub fn chamfer(&mut self, a: Var, b: Var, squared: bool) -> Var {
        let pa = self.value(a).to_points();
        let pb = self.value(b).to_points();
        let ta = KdTree::new(&pa);
        let tb = KdTree::new(&pb);
        let nn_ab: Vec<usize> = pa.iter().map(|p| tb.nearest(p).0).collect();
        let nn_ba: Vec<usize> = pb.iter().map(|p| ta.nearest(p).0).collect();
        let f = |x: &[f64; 3], y: &[f64; 3]| {
            let d2 = crate::spatial::dist2(x, y);
            if squared {
                d2
            } else {
                d2.sqrt()
            }
        };
        let s_ab: f64 = pa.iter().zip(&nn_ab).map(|(p, &j)| f(p, &pb[j])).sum::<f64>() / pa.len() as f64;
        let s_ba: f64 = pb.iter().zip(&nn_ba).map(|(p, &j)| f(p, &pa[j])).sum::<f64>() / pb.len() as f64;
        let ng = self.ng(&[a, b]);
        self.push(Tensor::scalar(s_ab + s_ba), Op::Chamfer { a, b, nn_ab, nn_ba, squared }, ng)
    }

    pub fn sparse_matmul(&mut self, s: Rc<SparseMatrix>, a: Var) -> Var {
        assert_eq!(s.cols, self.value(a).rows(), "sparse product dimension mismatch");
        let value = s.mul_dense(self.value(a));
        let ng = self.ng(&[a]);
        self.push(value, Op::Sparse(a, s), ng)
    }

    /// Patch extraction for a `3x3x3`, stride-2, padding-1 volumetric
    /// convolution. Input is `channels x side^3`; output is
    /// `(channels * 27) x (side/2)^3`.
    pub fn im2col3d(&mut self, input: Var, channels: usize, side: usize) -> Var {
        let value = im2col3d(self.value(input), channels, side);
        let ng = self.ng(&[input]);
        self.push(value, Op::Im2Col { input, channels, side }, ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a).clone();
        assert_eq!(t.len(), rows * cols, "reshape size mismatch");
        let ng = self.ng(&[a]);
        self.push(Tensor::from_raw(rows, cols, t.into_data()), Op::Reshape(a), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        ensure!(lv.len() == 1, Contract, "loss must be a scalar, got shape {:?}", lv.shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let named = self.names.iter().map(|(n, v)| (n.clone(), *v)).collect();
        Ok(Gradients { grads, named })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let acc = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(false, true, m, n, k, g.data(), tb.data(), &mut ga);
                    acc(*a, Tensor::from_raw(m, k, ga), grads);
                }
                if self.needs_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(true, false, k, m, n, ta.data(), g.data(), &mut gb);
                    acc(*b, Tensor::from_raw(k, n, gb), grads);
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = ((ta.rows(), ta.cols()), (tb.rows(), tb.cols()));
                let (r, c) = (g.rows(), g.cols());
                let at = |t: &Tensor, s: (usize, usize), i: usize, j: usize| t.data()[(i % s.0) * s.1 + (j % s.1)];
                if self.needs_grad(*a) {
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let gv = g.data()[i * c + j];
                            ga[i * c + j] = match kind {
                                Binary::Add | Binary::Sub => gv,
                                Binary::Mul => gv * at(tb, sb, i, j),
                                Binary::Div => gv / at(tb, sb, i, j),
                            };
                        }
                    }
                    acc(*a, reduce_to(Tensor::from_raw(r, c, ga), sa.0, sa.1), grads);
                }
                if self.needs_grad(*b) {
                    let mut gb = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let gv = g.data()[i * c + j];
                            gb[i * c + j] = match kind {
                                Binary::Add => gv,
                                Binary::Sub => -gv,
                                Binary::Mul => gv * at(ta, sa, i, j),
                                Binary::Div => {
                                    let y = at(tb, sb, i, j);
                                    -gv * at(ta, sa, i, j) / (y * y)
                                }
                            };
                        }
                    }
                    acc(*b, reduce_to(Tensor::from_raw(r, c, gb), sb.0, sb.1), grads);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut out = g.clone();
                for ((o, &xv), &yv) in out.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    let d = match *kind {
                        Unary::Neg => -1.0,
                        Unary::Square => 2.0 * xv,
                        Unary::Sqrt => 0.5 / yv.max(1e-12),
                        Unary::Abs => {
                            if xv > 0.0 {
                                1.0
                            } else if xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Exp => yv,
                        Unary::Log => 1.0 / xv,
                        Unary::Sin => xv.cos(),
                        Unary::Cos => -xv.sin(),
                        Unary::Recip => -yv * yv,
                        Unary::Acos => -1.0 / (1.0 - xv * xv).max(1e-12).sqrt(),
                        Unary::Sigmoid => yv * (1.0 - yv),
                        Unary::Relu => f64::from(xv > 0.0),
                        Unary::Softplus(b) => sigmoid(b * xv),
                        Unary::SoftplusGrad(b) => b * yv * (1.0 - yv),
                        Unary::LeakyRelu(s) => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                s
                            }
                        }
                        Unary::LeakyReluGrad(_) => 0.0,
                        Unary::Clamp(lo, hi) => f64::from(xv > lo && xv < hi),
                        Unary::Scale(c) => c,
                        Unary::AddConst(_) => 1.0,
                    };
                    *o *= d;
                }
                acc(*a, out, grads);
            }
            Op::Concat(parts) => {
                let (rows, cols) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = (t.rows(), t.cols());
                    if self.needs_grad(p) {
                        let mut gp = vec![0.0; r * c];
                        for i in 0..rows {
                            let src = &g.data()[i * cols + off..i * cols + off + c];
                            let dst = &mut gp[(i % r) * c..(i % r) * c + c];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        acc(p, Tensor::from_raw(r, c, gp), grads);
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let t = self.value(*a);
                let (r, c) = (t.rows(), t.cols());
                let w = g.cols();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                }
                acc(*a, Tensor::from_raw(r, c, ga), grads);
            }
            Op::Gather(a, idx) => {
                let t = self.value(*a);
                let (r, c) = (t.rows(), t.cols());
                let mut ga = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for (d, s) in ga[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(k)) {
                        *d += s;
                    }
                }
                acc(*a, Tensor::from_raw(r, c, ga), grads);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::filled(t.rows(), t.cols(), g.item()), grads);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::filled(t.rows(), t.cols(), g.item() / t.len() as f64), grads);
            }
            Op::RowSum(a) => {
                let t = self.value(*a);
                let (r, c) = (t.rows(), t.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c..(i + 1) * c].fill(g.data()[i]);
                }
                acc(*a, Tensor::from_raw(r, c, ga), grads);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::from_raw(r, c, ga), grads);
            }
            Op::PosEnc(a, order) => {
                let x = self.value(*a);
                let (n, d) = (x.rows(), x.cols());
                let w = 1 + 2 * order;
                let mut ga = vec![0.0; n * d];
                for i in 0..n {
                    let gr = g.row_slice(i);
                    for c in 0..d {
                        let xv = x.data()[i * d + c];
                        let base = c * w;
                        let mut s = gr[base];
                        for l in 0..*order {
                            let f = (1u64 << l) as f64 * PI;
                            s += f * ((f * xv).cos() * gr[base + 1 + 2 * l] - (f * xv).sin() * gr[base + 2 + 2 * l]);
                        }
                        ga[i * d + c] = s;
                    }
                }
                acc(*a, Tensor::from_raw(n, d, ga), grads);
            }
            Op::QuatToRot(q) => {
                let t = self.value(*q);
                let k = t.rows();
                let mut gq = vec![0.0; k * 4];
                for i in 0..k {
                    let r = t.row_slice(i);
                    let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt().max(1e-12);
                    let u = [r[0] / n, r[1] / n, r[2] / n, r[3] / n];
                    let jac = quat_matrix_jacobian(u);
                    let gr = g.row_slice(i);
                    let mut gu = [0.0; 4];
                    for (a, row) in jac.iter().enumerate() {
                        gu[a] = row.iter().zip(gr).map(|(x, y)| x * y).sum();
                    }
                    // Through the normalization u = q / |q|.
                    let dot: f64 = gu.iter().zip(&u).map(|(a, b)| a * b).sum();
                    for a in 0..4 {
                        gq[i * 4 + a] = (gu[a] - dot * u[a]) / n;
                    }
                }
                acc(*q, Tensor::from_raw(k, 4, gq), grads);
            }
            Op::RowMatVec(m, v) => {
                let (tm, tv) = (self.value(*m), self.value(*v));
                let n = tm.rows();
                if self.needs_grad(*m) {
                    let mut gm = vec![0.0; n * 9];
                    for i in 0..n {
                        let x = tv.row_slice(i);
                        let gi = g.row_slice(i);
                        for r in 0..3 {
                            for c in 0..3 {
                                gm[i * 9 + r * 3 + c] = gi[r] * x[c];
                            }
                        }
                    }
                    acc(*m, Tensor::from_raw(n, 9, gm), grads);
                }
                if self.needs_grad(*v) {
                    let mut gv = vec![0.0; n * 3];
                    for i in 0..n {
                        let a = tm.row_slice(i);
                        let gi = g.row_slice(i);
                        for c in 0..3 {
                            gv[i * 3 + c] = (0..3).map(|r| a[r * 3 + c] * gi[r]).sum();
                        }
                    }
                    acc(*v, Tensor::from_raw(n, 3, gv), grads);
                }
            }
            Op::Chamfer { a, b, nn_ab, nn_ba, squared } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (na, nb) = (ta.rows(), tb.rows());
                let mut ga = vec![0.0; na * 3];
                let mut gb = vec![0.0; nb * 3];
                let gs = g.item();
                let deriv = |x: &[f64], y: &[f64], out: &mut [f64; 3]| {
                    let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
                    if *squared {
                        *out = [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]];
                    } else {
                        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                        *out = if len > 0.0 { [d[0] / len, d[1] / len, d[2] / len] } else { [0.0; 3] };
                    }
                };
                let mut dv = [0.0; 3];
                let wa = gs / na as f64;
                for (i, &j) in nn_ab.iter().enumerate() {
                    deriv(ta.row_slice(i), tb.row_slice(j), &mut dv);
                    for c in 0..3 {
                        ga[i * 3 + c] += wa * dv[c];
                        gb[j * 3 + c] -= wa * dv[c];
                    }
                }
                let wb = gs / nb as f64;
                for (j, &i) in nn_ba.iter().enumerate() {
                    deriv(tb.row_slice(j), ta.row_slice(i), &mut dv);
                    for c in 0..3 {
                        gb[j * 3 + c] += wb * dv[c];
                        ga[i * 3 + c] -= wb * dv[c];
                    }
                }
                acc(*a, Tensor::from_raw(na, 3, ga), grads);
                acc(*b, Tensor::from_raw(nb, 3, gb), grads);
            }
            Op::Sparse(a, s) => {
                acc(*a, s.mul_transpose_dense(g), grads);
            }
            Op::Im2Col { input, channels, side } => {
                acc(*input, col2im3d(g, *channels, *side), grads);
            }
            Op::Reshape(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::from_raw(t.rows(), t.cols(), g.data().to_vec()), grads);
            }
        }
    }
}

/// Fourier feature expansion evaluated directly on a tensor.
pub fn positional_encoding(x: &Tensor, order: usize) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let w = 1 + 2 * order;
    let mut out = vec![0.0; n * d * w];
    for i in 0..n {
        for c in 0..d {
            let xv = x.data()[i * d + c];
            let base = i * d * w + c * w;
            out[base] = xv;
            for l in 0..order {
                let f = (1u64 << l) as f64 * PI;
                out[base + 1 + 2 * l] = (f * xv).sin();
                out[base + 2 + 2 * l] = (f * xv).cos();
            }
        }
    }
    Tensor::from_raw(n, d * w, out)
}

fn im2col3d(x: &Tensor, channels: usize, side: usize) -> Tensor {
    assert_eq!(x.rows(), channels);
    assert_eq!(x.cols(), side * side * side);
    assert!(side >= 2 && side % 2 == 0, "volumetric side must be even");
    let os = side / 2;
    let ov = os * os * os;
    let mut out = vec![0.0; channels * 27 * ov];
    let xd = x.data();
    for c in 0..channels {
        for k in 0..27 {
            let (kx, ky, kz) = (k / 9, (k / 3) % 3, k % 3);
            let row = &mut out[(c * 27 + k) * ov..(c * 27 + k + 1) * ov];
            for ox in 0..os {
                let ix = (2 * ox + kx) as isize - 1;
                if ix < 0 || ix >= side as isize {
                    continue;
                }
                for oy in 0..os {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    for oz in 0..os {
                        let iz = (2 * oz + kz) as isize - 1;
                        if iz < 0 || iz >= side as isize {
                            continue;
                        }
                        let src = c * side * side * side + ((ix as usize * side) + iy as usize) * side + iz as usize;
                        row[(ox * os + oy) * os + oz] = xd[src];
                    }
                }
            }
        }
    }
    Tensor::from_raw(channels * 27, ov, out)
}

fn col2im3d(g: &Tensor, channels: usize, side: usize) -> Tensor {
    let os = side / 2;
    let ov = os * os * os;
    let mut out = vec![0.0; channels * side * side * side];
    let gd = g.data();
    for c in 0..channels {
        for k in 0..27 {
            let (kx, ky, kz) = (k / 9, (k / 3) % 3, k % 3);
            let row = &gd[(c * 27 + k) * ov..(c * 27 + k + 1) * ov];
            for ox in 0..os {
                let ix = (2 * ox + kx) as isize - 1;
                if ix < 0 || ix >= side as isize {
                    continue;
                }
                for oy in 0..os {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    for oz in 0..os {
                        let iz = (2 * oz + kz) as isize - 1;
                        if iz < 0 || iz >= side as isize {
                            continue;
                        }
                        let dst = c * side * side * side + ((ix as usize * side) + iy as usize) * side + iz as usize;
                        out[dst] += row[(ox * os + oy) * os + oz];
                    }
                }
            }
        }
    }
    Tensor::from_raw(channels, side * side * side, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Tensor, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.leaf("x", x0.clone());
        let y = build(&mut tape, x);
        let grads = tape.backward(y).unwrap();
        let g = grads.named("x").cloned().unwrap_or_else(|| Tensor::zeros(x0.rows(), x0.cols()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let eval = |t: Tensor| {
                let mut tape = Tape::new();
                let x = tape.leaf("x", t);
                let y = build(&mut tape, x);
                tape.scalar_value(y)
            };
            let fd = (eval(xp) - eval(xm)) / (2.0 * h);
            let an = g.data()[i];
            assert!((fd - an).abs() <= tol * (1.0 + fd.abs()), "component {i}: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf("w", Tensor::row(&[1.0, 2.0]));
        let sq = tape.mul(w, w);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.named("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(tape.scalar_value(y), 0.5);
        assert_eq!(g.named("x").unwrap().item(), 0.25);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", Tensor::row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn broadcasting_ops_match_fd() {
        let x0 = Tensor::matrix(3, 2, vec![0.3, -0.2, 0.5, 0.9, -1.1, 0.4]).unwrap();
        fd_check(
            |t, x| {
                let col = t.row_sum(x);
                let d = t.div(x, col);
                let r = t.slice_cols(x, 0, 1);
                let s = t.mul(d, r);
                let e = t.unary(Unary::Softplus(3.0), s);
                t.mean(e)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn unary_ops_match_fd() {
        let x0 = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.7, -0.6, 0.1]).unwrap();
        for kind in [
            Unary::Square,
            Unary::Exp,
            Unary::Sin,
            Unary::Cos,
            Unary::Acos,
            Unary::Sigmoid,
            Unary::Softplus(10.0),
            Unary::SoftplusGrad(10.0),
            Unary::LeakyRelu(0.01),
            Unary::Abs,
        ] {
            fd_check(
                |t, x| {
                    let y = t.unary(kind, x);
                    let z = t.square(y);
                    t.sum(z)
                },
                x0.clone(),
                1e-5,
            );
        }
    }

    #[test]
    fn softmax_concat_gather_match_fd() {
        let x0 = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.7, -0.6, 0.1]).unwrap();
        fd_check(
            |t, x| {
                let z = t.slice_cols(x, 1, 2);
                let z = t.reshape(z, 1, 2);
                let c = t.concat(&[x, z]);
                let s = t.softmax_rows(c);
                let g = t.gather_rows(s, Rc::new(vec![1, 0, 1]));
                let w = t.constant(Tensor::matrix(5, 1, vec![1., -2., 3., 0.5, 0.1]).unwrap());
                let p = t.matmul(g, w);
                let p = t.square(p);
                t.sum(p)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn quaternion_and_matvec_match_fd() {
        let x0 = Tensor::matrix(2, 4, vec![0.9, 0.1, -0.3, 0.2, 0.5, 0.5, 0.1, -0.7]).unwrap();
        fd_check(
            |t, q| {
                let r = t.quat_to_rotation(q);
                let v = t.constant(Tensor::matrix(2, 3, vec![1., 2., 3., -1., 0.5, 0.2]).unwrap());
                let y = t.row_mat_vec(r, v);
                let w = t.constant(Tensor::matrix(3, 1, vec![0.3, -0.7, 1.1]).unwrap());
                let y = t.matmul(y, w);
                let y = t.square(y);
                t.sum(y)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let q = [0.5f64, 0.5, 0.1, -0.7];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = quat_matrix([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i * 3 + k] * r[j * 3 + k]).sum();
                assert!((d - f64::from(i == j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posenc_and_chamfer_match_fd() {
        let x0 = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.7, -0.6, 0.1]).unwrap();
        fd_check(
            |t, x| {
                let p = t.positional_encode(x, 3);
                let s = t.square(p);
                t.mean(s)
            },
            x0.clone(),
            1e-6,
        );
        fd_check(
            |t, x| {
                let b = t.constant(Tensor::matrix(3, 3, vec![0., 0., 0., 1., 0.2, 0., 0.1, -0.5, 0.4]).unwrap());
                let c1 = t.chamfer(x, b, true);
                let c2 = t.chamfer(b, x, false);
                t.add(c1, c2)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn im2col_sparse_match_fd() {
        let side = 4;
        let x0 = Tensor::matrix(2, 64, (0..128).map(|i| ((i * 37 % 17) as f64 - 8.0) / 10.0).collect()).unwrap();
        fd_check(
            |t, x| {
                let c = t.im2col3d(x, 2, side);
                let w = t.constant(Tensor::matrix(3, 54, (0..162).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect()).unwrap());
                let y = t.matmul(w, c);
                let y = t.unary(Unary::LeakyRelu(0.1), y);
                let y = t.square(y);
                t.sum(y)
            },
            x0,
            1e-5,
        );
        let s = Rc::new(SparseMatrix::from_triplets(3, 3, vec![(0, 1, 0.5), (1, 0, -1.0), (2, 2, 2.0), (0, 1, 0.5)]));
        fd_check(
            move |t, x| {
                let y = t.sparse_matmul(s.clone(), x);
                let y = t.square(y);
                t.sum(y)
            },
            Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            1e-6,
        );
    }
}
