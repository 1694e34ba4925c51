use std::borrow::Cow;
use std::fmt;

use super::tensor::{Tensor, gemm};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Row norm below which Gram-Schmidt switches to a fallback basis vector.
pub const GRAM_SCHMIDT_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: `(upstream, inputs, output) -> input grads`.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

#[derive(Clone, Copy, Debug)]
struct GsRow {
    e: [[f64; 3]; 3],
    src: [[f64; 3]; 3],
    norm: [f64; 3],
    fallback: [bool; 3],
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Recip(Var),
    ClampMin(Var, f64),
    Transpose(Var),
    Reshape(Var),
    SliceCols { src: Var, start: usize },
    SliceRows { src: Var, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    RepeatRows(Var),
    GatherRows { src: Var, index: Vec<usize> },
    Softmax { src: Var, axis: usize },
    LogSoftmax { src: Var, axis: usize },
    LogSumExp { src: Var, axis: usize },
    Sum(Var),
    SumAxis { src: Var, axis: usize },
    MaxPool { src: Var, argmax: Vec<usize> },
    GramSchmidt { src: Var, rows: Vec<GsRow> },
    GroupLogDensity { points: Vec<[f64; 3]>, groups: Vec<usize>, fan_out: usize, mu: Var, u: Var, lam: Var },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Recip(..) => "recip",
            Op::ClampMin(..) => "clamp_min",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Concat { .. } => "concat",
            Op::RepeatRows(..) => "repeat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LogSumExp { .. } => "log_sum_exp",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxPool { .. } => "max_pool",
            Op::GramSchmidt { .. } => "gram_schmidt",
            Op::GroupLogDensity { .. } => "group_log_density",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Record of operations for reverse-mode differentiation.
///
/// Parameters can be recorded by reference ([`Tape::param`]) so that many
/// tapes may share one read-only parameter set.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl fmt::Debug for Tape<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_axis(axis: usize, op: &str) -> Result<()> {
    if axis > 1 {
        return Err(Error::shape(format!("{op}: axis {axis} out of range for rank 2")));
    }
    Ok(())
}

/// Iterates the lanes of a rank-2 tensor along `axis`: axis 1 lanes are
/// rows, axis 0 lanes are columns. Yields `(start, stride, len)`.
fn lanes(rows: usize, cols: usize, axis: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let (count, start_step, stride, len) =
        if axis == 1 { (rows, cols, 1, cols) } else { (cols, 1, cols, rows) };
    (0..count).map(move |l| (l * start_step, stride, len))
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn axpy3(y: &mut [f64; 3], alpha: f64, x: &[f64; 3]) {
    for i in 0..3 {
        y[i] += alpha * x[i];
    }
}

fn gram_schmidt_row(a: &[f64]) -> GsRow {
    let mut row = GsRow { e: [[0.0; 3]; 3], src: [[0.0; 3]; 3], norm: [0.0; 3], fallback: [false; 3] };
    for k in 0..3 {
        let given = [a[3 * k], a[3 * k + 1], a[3 * k + 2]];
        let project = |s: &[f64; 3], e: &[[f64; 3]; 3]| {
            let mut u = *s;
            for prev in e.iter().take(k) {
                let d = dot3(s, prev);
                axpy3(&mut u, -d, prev);
            }
            u
        };
        let mut src = given;
        let mut u = project(&src, &row.e);
        let mut n = dot3(&u, &u).sqrt();
        if n < GRAM_SCHMIDT_EPS {
            row.fallback[k] = true;
            // basis vector of this row's index first, then the others
            for b in [k, (k + 1) % 3, (k + 2) % 3] {
                let mut basis = [0.0; 3];
                basis[b] = 1.0;
                let ub = project(&basis, &row.e);
                let nb = dot3(&ub, &ub).sqrt();
                if nb >= 0.5 {
                    src = basis;
                    u = ub;
                    n = nb;
                    break;
                }
            }
        }
        row.src[k] = src;
        row.norm[k] = n;
        row.e[k] = [u[0] / n, u[1] / n, u[2] / n];
    }
    row
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::ScaleBy(a, b) => {
                self.ng(*a) || self.ng(*b)
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Recip(a)
            | Op::ClampMin(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::RepeatRows(a)
            | Op::Sum(a) => self.ng(*a),
            Op::SliceCols { src, .. }
            | Op::SliceRows { src, .. }
            | Op::GatherRows { src, .. }
            | Op::Softmax { src, .. }
            | Op::LogSoftmax { src, .. }
            | Op::LogSumExp { src, .. }
            | Op::SumAxis { src, .. }
            | Op::MaxPool { src, .. }
            | Op::GramSchmidt { src, .. } => self.ng(*src),
            Op::Concat { parts, .. } => parts.iter().any(|p| self.ng(*p)),
            Op::Affine { x, w, b } => self.ng(*x) || self.ng(*w) || self.ng(*b),
            Op::GroupLogDensity { mu, u, lam, .. } => self.ng(*mu) || self.ng(*u) || self.ng(*lam),
            Op::Custom { inputs, .. } => inputs.iter().any(|p| self.ng(*p)),
        };
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn leaf(&mut self, value: Cow<'p, Tensor>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input owned by the tape.
    pub fn var(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(Cow::Owned(value), true)
    }

    /// Differentiable input borrowed from a parameter store.
    pub fn param(&mut self, value: &'p Tensor) -> Result<Var> {
        self.leaf(Cow::Borrowed(value), true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(Cow::Owned(value), false)
    }

    // ---------------------------------------------------------------- binary

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, op.name())?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = x.with_data(data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_rank2("matmul")?;
        let (k2, n) = self.value(b).expect_rank2("matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// `x * s` for a scalar-shaped `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("scale_by: factor must be a scalar"));
        }
        let f = self.value(s).item();
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::ScaleBy(x, s))
    }

    // ----------------------------------------------------------------- unary

    pub fn scale(&mut self, x: Var, f: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::Scale(x, f))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::sqrt);
        self.push(out, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| 1.0 / v);
        self.push(out, Op::Recip(x))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor));
        self.push(out, Op::ClampMin(x, floor))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).expect_rank2("transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, out)?, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        self.push(out, Op::Reshape(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).expect_rank2("slice_cols")?;
        if start + len > c {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {c}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src.row_slice(i)[start..start + len]);
        }
        self.push(Tensor::matrix(r, len, out)?, Op::SliceCols { src: x, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).expect_rank2("slice_rows")?;
        if start + len > r {
            return Err(Error::shape(format!("slice_rows {start}+{len} of {r}")));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::matrix(len, c, out)?, Op::SliceRows { src: x, start })
    }

    /// Concatenates rank-2 tensors along `axis` (0 stacks rows, 1 columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        check_axis(axis, "concat")?;
        if parts.is_empty() {
            return Err(Error::shape("concat of nothing"));
        }
        let dims: Vec<(usize, usize)> =
            parts.iter().map(|&p| self.value(p).expect_rank2("concat")).collect::<Result<_>>()?;
        let out = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::shape("concat rows: column counts differ"));
            }
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(dims.iter().map(|d| d.0).sum(), c, data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::shape("concat cols: row counts differ"));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(i));
                }
            }
            Tensor::matrix(r, total, data)?
        };
        self.push(out, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// `x W + b` with the single-row `b` added to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(x).expect_rank2("affine")?;
        let (k2, n) = self.value(w).expect_rank2("affine")?;
        if k != k2 || self.value(b).shape() != [1, n] {
            return Err(Error::shape(format!(
                "affine: {m}x{k} by {k2}x{n} plus {:?}",
                self.value(b).shape()
            )));
        }
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, 1.0);
        self.push(Tensor::matrix(m, n, out)?, Op::Affine { x, w, b })
    }

    /// Stacks `n` copies of a single-row tensor.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, c) = self.value(x).expect_rank2("repeat_rows")?;
        if r != 1 {
            return Err(Error::shape("repeat_rows expects a single row"));
        }
        let row = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(row);
        }
        self.push(Tensor::matrix(n, c, out)?, Op::RepeatRows(x))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).expect_rank2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("gather_rows index {bad} of {r}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(src.row_slice(i));
        }
        self.push(Tensor::matrix(index.len(), c, out)?, Op::GatherRows { src: x, index: index.to_vec() })
    }

    fn lane_map(&self, x: Var, axis: usize, op: &str, f: impl Fn(&mut [f64])) -> Result<Tensor> {
        check_axis(axis, op)?;
        let (r, c) = self.value(x).expect_rank2(op)?;
        let src = self.value(x);
        let mut out = src.data().to_vec();
        let mut lane = Vec::new();
        for (start, stride, len) in lanes(r, c, axis) {
            lane.clear();
            lane.extend((0..len).map(|t| out[start + t * stride]));
            f(&mut lane);
            for t in 0..len {
                out[start + t * stride] = lane[t];
            }
        }
        Ok(src.with_data(out))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.lane_map(x, axis, "softmax", |lane| {
            let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in lane.iter_mut() {
                *v /= s;
            }
        })?;
        self.push(out, Op::Softmax { src: x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.lane_map(x, axis, "log_softmax", |lane| {
            let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in lane.iter_mut() {
                *v -= lse;
            }
        })?;
        self.push(out, Op::LogSoftmax { src: x, axis })
    }

    fn reduce(&self, x: Var, axis: usize, op: &str, f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Result<Tensor> {
        check_axis(axis, op)?;
        let (r, c) = self.value(x).expect_rank2(op)?;
        let src = self.value(x).data();
        let out: Vec<f64> = lanes(r, c, axis)
            .map(|(start, stride, len)| f(&mut (0..len).map(|t| src[start + t * stride])))
            .collect();
        if axis == 1 { Tensor::matrix(r, 1, out) } else { Tensor::matrix(1, c, out) }
    }

    pub fn log_sum_exp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.reduce(x, axis, "log_sum_exp", &|it: &mut dyn Iterator<Item = f64>| {
            let lane: Vec<f64> = it.collect();
            let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })?;
        self.push(out, Op::LogSumExp { src: x, axis })
    }

    /// Sum of all entries, as a `1x1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.reduce(x, axis, "sum_axis", &|it: &mut dyn Iterator<Item = f64>| it.sum())?;
        self.push(out, Op::SumAxis { src: x, axis })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Maximum along `axis`; ties route the gradient to the first maximum.
    pub fn max_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(axis, "max_pool")?;
        let (r, c) = self.value(x).expect_rank2("max_pool")?;
        let src = self.value(x).data();
        let mut argmax = Vec::new();
        let mut vals = Vec::new();
        for (start, stride, len) in lanes(r, c, axis) {
            let mut best = start;
            for t in 1..len {
                let idx = start + t * stride;
                if src[idx] > src[best] {
                    best = idx;
                }
            }
            argmax.push(best);
            vals.push(src[best]);
        }
        let out = if axis == 1 { Tensor::matrix(r, 1, vals)? } else { Tensor::matrix(1, c, vals)? };
        self.push(out, Op::MaxPool { src: x, argmax })
    }

    /// Orthonormalizes the rows of each `3x3` matrix stored as a row of a
    /// `Kx9` tensor (row-major within the row).
    pub fn gram_schmidt(&mut self, x: Var) -> Result<Var> {
        let (k, c) = self.value(x).expect_rank2("gram_schmidt")?;
        if c != 9 {
            return Err(Error::shape(format!("gram_schmidt expects Kx9, got {k}x{c}")));
        }
        let src = self.value(x);
        let rows: Vec<GsRow> = (0..k).map(|i| gram_schmidt_row(src.row_slice(i))).collect();
        let data = rows.iter().flat_map(|r| r.e.iter().flatten().copied()).collect();
        self.push(Tensor::matrix(k, 9, data)?, Op::GramSchmidt { src: x, rows })
    }

    /// Log-densities of Gaussians given by eigen-factors.
    ///
    /// Component `k` has mean `mu[k]`, orthonormal rows `u[k]` (a `3x3`
    /// flattened into 9 columns) and eigenvalues `lam[k]`, so that
    /// `Σ_k = U_kᵀ diag(λ_k) U_k`. Point `i` is evaluated against the
    /// `fan_out` components of its group `groups[i]`, producing an
    /// `N x fan_out` tensor.
    pub fn group_log_density(
        &mut self,
        points: &[[f64; 3]],
        groups: &[usize],
        fan_out: usize,
        mu: Var,
        u: Var,
        lam: Var,
    ) -> Result<Var> {
        let (k, c) = self.value(mu).expect_rank2("group_log_density")?;
        if c != 3 || self.value(u).shape() != [k, 9] || self.value(lam).shape() != [k, 3] {
            return Err(Error::shape("group_log_density expects mu Kx3, u Kx9, lam Kx3"));
        }
        if points.len() != groups.len() {
            return Err(Error::shape("group_log_density: one group per point"));
        }
        if fan_out == 0 || groups.iter().any(|&g| (g + 1) * fan_out > k) {
            return Err(Error::shape("group_log_density: group index out of range"));
        }
        let (m, uu, l) = (self.value(mu).data(), self.value(u).data(), self.value(lam).data());
        let mut out = Vec::with_capacity(points.len() * fan_out);
        for (x, &g) in points.iter().zip(groups) {
            for j in g * fan_out..(g + 1) * fan_out {
                let d = [x[0] - m[3 * j], x[1] - m[3 * j + 1], x[2] - m[3 * j + 2]];
                let mut v = 3.0 * LN_2PI;
                for r in 0..3 {
                    let row = &uu[9 * j + 3 * r..9 * j + 3 * r + 3];
                    let y = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
                    let lr = l[3 * j + r];
                    v += lr.ln() + y * y / lr;
                }
                out.push(-0.5 * v);
            }
        }
        let out = Tensor::matrix(points.len(), fan_out, out)?;
        self.push(
            out,
            Op::GroupLogDensity { points: points.to_vec(), groups: groups.to_vec(), fan_out, mu, u, lam },
        )
    }

    /// Records an operation with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Result<Var> {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward })
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !self.value(output).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass that adds `scale` times the gradient of each `params[i]`
    /// into `sinks[i]` and keeps nothing else.
    pub fn backward_into(&self, output: Var, params: &[Var], sinks: &mut [Tensor], scale: f64) -> Result<()> {
        if !self.value(output).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        if params.len() != sinks.len() {
            return Err(Error::shape("one sink per parameter required"));
        }
        let mut keep = vec![false; output.0 + 1];
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        for (p, sink) in params.iter().zip(sinks.iter_mut()) {
            if sink.shape() != self.value(*p).shape() {
                return Err(Error::shape(format!(
                    "sink {:?} for parameter {:?}",
                    sink.shape(),
                    self.value(*p).shape()
                )));
            }
            if p.0 <= output.0 {
                keep[p.0] = true;
                grads[p.0] = Some(std::mem::replace(sink, Tensor::zeros(&[0, 0])));
            }
        }
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), scale));
        for i in (0..=output.0).rev() {
            if keep[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
        }
        for (p, sink) in params.iter().zip(sinks.iter_mut()) {
            if p.0 <= output.0 {
                *sink = grads[p.0].take().expect("kept");
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulates `f(index) ` into the gradient of `v` without allocating a
    /// temporary when a buffer already exists.
    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("just filled").data_mut());
    }

    fn propagate(&self, node: &Node<'_>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &*node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                self.accum_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * y[i];
                    }
                });
                self.accum_with(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * x[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                // dA = G Bᵀ, dB = Aᵀ G
                self.accum_with(grads, *a, |d| gemm(m, n, k, gd, false, y, true, d, 1.0));
                self.accum_with(grads, *b, |d| gemm(k, m, n, x, true, gd, false, d, 1.0));
            }
            Op::Affine { x, w, b } => {
                let (m, k) = (self.value(*x).rows(), self.value(*x).cols());
                let n = self.value(*w).cols();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.accum_with(grads, *x, |d| gemm(m, n, k, gd, false, wv, true, d, 1.0));
                self.accum_with(grads, *w, |d| gemm(k, m, n, xv, true, gd, false, d, 1.0));
                self.accum_with(grads, *b, |d| {
                    for row in gd.chunks(n) {
                        for (dj, gj) in d.iter_mut().zip(row) {
                            *dj += gj;
                        }
                    }
                });
            }
            Op::Scale(a, f) => self.accum(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::ScaleBy(x, s) => {
                let f = self.value(*s).item();
                self.accum(grads, *x, g.map(|v| v * f));
                let xv = self.value(*x).data();
                let ds: f64 = gd.iter().zip(xv).map(|(a, b)| a * b).sum();
                self.accum(grads, *s, Tensor::scalar(ds));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accum_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += gd[i];
                        }
                    }
                });
            }
            Op::Exp(a) => self.elementwise_grad(grads, *a, gd, |i, _| out.data()[i]),
            Op::Log(a) => self.elementwise_grad(grads, *a, gd, |_, x| 1.0 / x),
            Op::Square(a) => self.elementwise_grad(grads, *a, gd, |_, x| 2.0 * x),
            Op::Sqrt(a) => self.elementwise_grad(grads, *a, gd, |i, _| 0.5 / out.data()[i]),
            Op::Abs(a) => self.elementwise_grad(grads, *a, gd, |_, x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Recip(a) => self.elementwise_grad(grads, *a, gd, |i, _| -out.data()[i] * out.data()[i]),
            Op::ClampMin(a, floor) => {
                self.elementwise_grad(grads, *a, gd, |_, x| if x > *floor { 1.0 } else { 0.0 })
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                self.accum_with(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += gd[i * c + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accum_with(grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i];
                }
            }),
            Op::SliceCols { src, start } => {
                let c = self.value(*src).cols();
                let (r, len) = (out.rows(), out.cols());
                self.accum_with(grads, *src, |d| {
                    for i in 0..r {
                        for j in 0..len {
                            d[i * c + start + j] += gd[i * len + j];
                        }
                    }
                });
            }
            Op::SliceRows { src, start } => {
                let c = out.cols();
                self.accum_with(grads, *src, |d| {
                    for (t, v) in gd.iter().enumerate() {
                        d[start * c + t] += v;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = (self.value(p).rows(), self.value(p).cols());
                    if *axis == 0 {
                        let base = offset * c;
                        self.accum_with(grads, p, |d| {
                            for t in 0..d.len() {
                                d[t] += gd[base + t];
                            }
                        });
                        offset += r;
                    } else {
                        let off = offset;
                        self.accum_with(grads, p, |d| {
                            for i in 0..r {
                                for j in 0..c {
                                    d[i * c + j] += gd[i * total + off + j];
                                }
                            }
                        });
                        offset += c;
                    }
                }
            }
            Op::RepeatRows(a) => {
                let c = out.cols();
                self.accum_with(grads, *a, |d| {
                    for row in gd.chunks(c) {
                        for j in 0..c {
                            d[j] += row[j];
                        }
                    }
                });
            }
            Op::GatherRows { src, index } => {
                let c = out.cols();
                self.accum_with(grads, *src, |d| {
                    for (t, &i) in index.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += gd[t * c + j];
                        }
                    }
                });
            }
            Op::Softmax { src, axis } => {
                let (r, c) = (out.rows(), out.cols());
                let y = out.data();
                self.accum_with(grads, *src, |d| {
                    for (start, stride, len) in lanes(r, c, *axis) {
                        let dot: f64 = (0..len).map(|t| gd[start + t * stride] * y[start + t * stride]).sum();
                        for t in 0..len {
                            let i = start + t * stride;
                            d[i] += y[i] * (gd[i] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { src, axis } => {
                let (r, c) = (out.rows(), out.cols());
                let y = out.data();
                self.accum_with(grads, *src, |d| {
                    for (start, stride, len) in lanes(r, c, *axis) {
                        let gs: f64 = (0..len).map(|t| gd[start + t * stride]).sum();
                        for t in 0..len {
                            let i = start + t * stride;
                            d[i] += gd[i] - y[i].exp() * gs;
                        }
                    }
                });
            }
            Op::LogSumExp { src, axis } => {
                let x = self.value(*src);
                let (r, c) = (x.rows(), x.cols());
                let xd = x.data();
                let yd = out.data();
                self.accum_with(grads, *src, |d| {
                    for (l, (start, stride, len)) in lanes(r, c, *axis).enumerate() {
                        for t in 0..len {
                            let i = start + t * stride;
                            d[i] += gd[l] * (xd[i] - yd[l]).exp();
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accum_with(grads, *a, |d| d.iter_mut().for_each(|v| *v += s));
            }
            Op::SumAxis { src, axis } => {
                let x = self.value(*src);
                let (r, c) = (x.rows(), x.cols());
                self.accum_with(grads, *src, |d| {
                    for (l, (start, stride, len)) in lanes(r, c, *axis).enumerate() {
                        for t in 0..len {
                            d[start + t * stride] += gd[l];
                        }
                    }
                });
            }
            Op::MaxPool { src, argmax, .. } => self.accum_with(grads, *src, |d| {
                for (l, &i) in argmax.iter().enumerate() {
                    d[i] += gd[l];
                }
            }),
            Op::GramSchmidt { src, rows } => {
                self.accum_with(grads, *src, |d| {
                    for (k, row) in rows.iter().enumerate() {
                        gram_schmidt_backward(row, &gd[9 * k..9 * k + 9], &mut d[9 * k..9 * k + 9]);
                    }
                });
            }
            Op::GroupLogDensity { points, groups, fan_out, mu, u, lam } => {
                self.group_log_density_backward(grads, gd, points, groups, *fan_out, *mu, *u, *lam);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                for (v, gin) in inputs.iter().zip(backward(g, &vals, out)) {
                    self.accum(grads, *v, gin);
                }
            }
        }
    }

    fn elementwise_grad(&self, grads: &mut [Option<Tensor>], a: Var, gd: &[f64], df: impl Fn(usize, f64) -> f64) {
        let x = self.value(a).data();
        self.accum_with(grads, a, |d| {
            for i in 0..d.len() {
                d[i] += gd[i] * df(i, x[i]);
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn group_log_density_backward(
        &self,
        grads: &mut [Option<Tensor>],
        gd: &[f64],
        points: &[[f64; 3]],
        groups: &[usize],
        fan_out: usize,
        mu: Var,
        u: Var,
        lam: Var,
    ) {
        let k = self.value(mu).rows();
        let (m, uu, l) = (self.value(mu).data(), self.value(u).data(), self.value(lam).data());
        let mut dmu = vec![0.0; 3 * k];
        let mut du = vec![0.0; 9 * k];
        let mut dl = vec![0.0; 3 * k];
        for (i, (x, &grp)) in points.iter().zip(groups).enumerate() {
            for (c, j) in (grp * fan_out..(grp + 1) * fan_out).enumerate() {
                let g = gd[i * fan_out + c];
                if g == 0.0 {
                    continue;
                }
                let d = [x[0] - m[3 * j], x[1] - m[3 * j + 1], x[2] - m[3 * j + 2]];
                for r in 0..3 {
                    let row = &uu[9 * j + 3 * r..9 * j + 3 * r + 3];
                    let y = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
                    let lr = l[3 * j + r];
                    // out = -0.5 (ln λ + y²/λ)
                    dl[3 * j + r] += g * (-0.5) * (1.0 / lr - y * y / (lr * lr));
                    let gy = -g * y / lr;
                    for t in 0..3 {
                        du[9 * j + 3 * r + t] += gy * d[t];
                        dmu[3 * j + t] -= gy * row[t];
                    }
                }
            }
        }
        self.accum_with(grads, mu, |d| d.iter_mut().zip(&dmu).for_each(|(a, b)| *a += b));
        self.accum_with(grads, u, |d| d.iter_mut().zip(&du).for_each(|(a, b)| *a += b));
        self.accum_with(grads, lam, |d| d.iter_mut().zip(&dl).for_each(|(a, b)| *a += b));
    }
}

fn gram_schmidt_backward(row: &GsRow, g_out: &[f64], d_in: &mut [f64]) {
    let mut ge = [[0.0; 3]; 3];
    for k in 0..3 {
        ge[k] = [g_out[3 * k], g_out[3 * k + 1], g_out[3 * k + 2]];
    }
    for k in (0..3).rev() {
        let e = row.e[k];
        // e = u / |u|
        let proj = dot3(&e, &ge[k]);
        let mut gu = [0.0; 3];
        for t in 0..3 {
            gu[t] = (ge[k][t] - e[t] * proj) / row.norm[k];
        }
        // u = s - Σ_{p<k} (s·e_p) e_p
        let s = row.src[k];
        let mut gs = gu;
        for p in 0..k {
            let ep = row.e[p];
            let s_ep = dot3(&s, &ep);
            let ep_gu = dot3(&ep, &gu);
            axpy3(&mut gs, -ep_gu, &ep);
            for t in 0..3 {
                ge[p][t] -= s_ep * gu[t] + ep_gu * s[t];
            }
        }
        if !row.fallback[k] {
            for t in 0..3 {
                d_in[3 * k + t] += gs[t];
            }
        }
    }
}
