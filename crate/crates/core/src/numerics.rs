//! Dense 2-D tensors and a tape-based reverse-mode autodiff engine.
//!
//! Everything is `f64` and row-major. A [`Tape`] records every operation
//! applied to its [`Var`]s in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use modt::numerics::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{ModtError, Result};

/// Lower bound applied to the argument of [`Tape::ln`].
pub const LN_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ModtError::invalid(format!(
                "tensor data has {} values, shape {}x{} needs {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ModtError::invalid(format!("non-finite tensor value at flat index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(1, 1, vec![value])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Builds a tensor from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(ModtError::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Plain matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(ModtError::invalid(format!(
                "matmul shape mismatch {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(matmul_raw(self, other))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_raw(idx.len(), self.cols, data)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_raw(n, m, out)
}

/// `a * b^T` without materializing the transpose.
fn matmul_t_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            let brow = b.row(j);
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out.push(s);
        }
    }
    Tensor::from_raw(n, m, out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if m.cols == 0 || m.rows == 0 {
        return Err(ModtError::invalid("softmax_rows on empty tensor"));
    }
    Ok(softmax_rows_raw(m))
}

fn softmax_rows_raw(m: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.rows {
        let row = m.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - mx).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Tensor::from_raw(m.rows, m.cols, out)
}

fn log_softmax_rows_raw(m: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.rows {
        let row = m.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::from_raw(m.rows, m.cols, out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Rc<Vec<f64>> },
    NormalizeRows { x: Var, norms: Rc<Vec<f64>> },
    ClampUnit(Var),
    GatherRows { x: Var, idx: Rc<Vec<Option<usize>>> },
    MaxPoolGroups { x: Var, argmax: Rc<Vec<usize>> },
    PointwiseMlp { x: Var, w_in: Var, w_out: Var, hidden: Rc<Vec<f64>> },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Confined to one thread; build one tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_op(&self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        self.push(value, op, needs)
    }

    /// Leaf that gradients are tracked for.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn values2(&self, a: Var, b: Var) -> (Rc<Tensor>, Rc<Tensor>) {
        let nodes = self.nodes.borrow();
        (Rc::clone(&nodes[a.0].value), Rc::clone(&nodes[b.0].value))
    }

    fn expect_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(ModtError::invalid(format!("{what}: shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.values2(a, b);
        let out = va.matmul(&vb)?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.values2(a, b);
        if va.cols != vb.cols {
            return Err(ModtError::invalid(format!(
                "matmul_t shape mismatch {:?} x {:?}^T",
                va.shape(),
                vb.shape()
            )));
        }
        let out = matmul_t_raw(&va, &vb);
        Ok(self.push_op(out, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push_op(out, Op::Transpose(a), &[a])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "add")?;
        let (va, vb) = self.values2(a, b);
        Ok(self.push_op(va.zip(&vb, |x, y| x + y), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "sub")?;
        let (va, vb) = self.values2(a, b);
        Ok(self.push_op(va.zip(&vb, |x, y| x - y), Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.try_mul(a, b).expect("mul shape mismatch")
    }

    pub fn try_mul(&self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "mul")?;
        let (va, vb) = self.values2(a, b);
        Ok(self.push_op(va.zip(&vb, |x, y| x * y), Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = self.values2(a, row);
        if vr.rows != 1 || vr.cols != va.cols {
            return Err(ModtError::invalid(format!(
                "add_row: row shape {:?} incompatible with {:?}",
                vr.shape(),
                va.shape()
            )));
        }
        let out = Tensor::from_fn(va.rows, va.cols, |r, c| va.get(r, c) + vr.data[c]);
        Ok(self.push_op(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = self.values2(a, row);
        if vr.rows != 1 || vr.cols != va.cols {
            return Err(ModtError::invalid(format!(
                "mul_row: row shape {:?} incompatible with {:?}",
                vr.shape(),
                va.shape()
            )));
        }
        let out = Tensor::from_fn(va.rows, va.cols, |r, c| va.get(r, c) * vr.data[c]);
        Ok(self.push_op(out, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push_op(out, Op::Scale(a, k), &[a])
    }

    /// Multiplies `a` by the 1x1 tensor `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var> {
        let (va, vs) = self.values2(a, s);
        if vs.shape() != (1, 1) {
            return Err(ModtError::invalid("scale_by expects a 1x1 scale"));
        }
        let k = vs.data[0];
        Ok(self.push_op(va.map(|v| v * k), Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.push_op(out, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push_op(out, Op::Exp(a), &[a])
    }

    /// Natural log with the argument clamped to at least [`LN_FLOOR`].
    pub fn ln(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(LN_FLOOR).ln());
        self.push_op(out, Op::Ln(a), &[a])
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push_op(out, Op::Abs(a), &[a])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn softplus(&self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push_op(out, Op::Softplus(a), &[a])
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = softmax_rows(&self.value(a))?;
        Ok(self.push_op(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(ModtError::invalid("log_softmax_rows on empty tensor"));
        }
        let out = log_softmax_rows_raw(&va);
        Ok(self.push_op(out, Op::LogSoftmaxRows(a), &[a]))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` (population variance).
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Result<Var> {
        let va = self.value(a);
        if va.cols == 0 {
            return Err(ModtError::invalid("layer_norm_rows on zero-width tensor"));
        }
        let n = va.cols as f64;
        let mut out = Vec::with_capacity(va.len());
        let mut inv_std = Vec::with_capacity(va.rows);
        for r in 0..va.rows {
            let row = va.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|v| (v - mean) * is));
        }
        let out = Tensor::from_raw(va.rows, va.cols, out);
        Ok(self.push_op(
            out,
            Op::LayerNormRows {
                x: a,
                inv_std: Rc::new(inv_std),
            },
            &[a],
        ))
    }

    /// Scales each row to unit length; rows with norm `<= eps` become zero.
    pub fn normalize_rows(&self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let mut out = Vec::with_capacity(va.len());
        let mut norms = Vec::with_capacity(va.rows);
        for r in 0..va.rows {
            let row = va.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > eps {
                out.extend(row.iter().map(|v| v / norm));
                norms.push(norm);
            } else {
                out.extend(std::iter::repeat_n(0.0, row.len()));
                norms.push(0.0);
            }
        }
        let out = Tensor::from_raw(va.rows, va.cols, out);
        self.push_op(
            out,
            Op::NormalizeRows {
                x: a,
                norms: Rc::new(norms),
            },
            &[a],
        )
    }

    /// Applies `v -> sum_h w_out[h] * tanh(v * w_in[h])` to every entry.
    /// `w_in` is `1 x C`, `w_out` is `C x 1`.
    pub fn pointwise_mlp(&self, a: Var, w_in: Var, w_out: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (va, wi, wo) = (&nodes[a.0].value, &nodes[w_in.0].value, &nodes[w_out.0].value);
        let c = wi.cols;
        if wi.rows != 1 || wo.shape() != (c, 1) {
            return Err(ModtError::invalid(format!(
                "pointwise_mlp weights {:?} and {:?}",
                wi.shape(),
                wo.shape()
            )));
        }
        let mut hidden = Vec::with_capacity(va.len() * c);
        let mut out = Vec::with_capacity(va.len());
        for &x in &va.data {
            let mut acc = 0.0;
            for h in 0..c {
                let t = (x * wi.data[h]).tanh();
                acc += t * wo.data[h];
                hidden.push(t);
            }
            out.push(acc);
        }
        let out = Tensor::from_raw(va.rows, va.cols, out);
        let needs = nodes[a.0].needs_grad || nodes[w_in.0].needs_grad || nodes[w_out.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            out,
            Op::PointwiseMlp {
                x: a,
                w_in,
                w_out,
                hidden: Rc::new(hidden),
            },
            needs,
        ))
    }

    /// Clamps into `[-1, 1]`; gradient passes where the input is inside.
    pub fn clamp_unit(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.clamp(-1.0, 1.0));
        self.push_op(out, Op::ClampUnit(a), &[a])
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(&self, a: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let va = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * va.cols);
        for &i in &idx {
            match i {
                Some(i) if i < va.rows => data.extend_from_slice(va.row(i)),
                Some(i) => {
                    return Err(ModtError::invalid(format!(
                        "gather_rows index {i} out of range for {} rows",
                        va.rows
                    )))
                }
                None => data.extend(std::iter::repeat_n(0.0, va.cols)),
            }
        }
        let out = Tensor::from_raw(idx.len(), va.cols, data);
        Ok(self.push_op(
            out,
            Op::GatherRows {
                x: a,
                idx: Rc::new(idx),
            },
            &[a],
        ))
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    pub fn max_pool_groups(&self, a: Var, group: usize) -> Result<Var> {
        let va = self.value(a);
        if group == 0 || !va.rows.is_multiple_of(group) {
            return Err(ModtError::invalid(format!(
                "max_pool_groups: {} rows not divisible into groups of {group}",
                va.rows
            )));
        }
        let groups = va.rows / group;
        let mut out = Vec::with_capacity(groups * va.cols);
        let mut argmax = Vec::with_capacity(groups * va.cols);
        for g in 0..groups {
            for c in 0..va.cols {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if va.get(r, c) > va.get(best, c) {
                        best = r;
                    }
                }
                out.push(va.get(best, c));
                argmax.push(best);
            }
        }
        let out = Tensor::from_raw(groups, va.cols, out);
        Ok(self.push_op(
            out,
            Op::MaxPoolGroups {
                x: a,
                argmax: Rc::new(argmax),
            },
            &[a],
        ))
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(ModtError::invalid(format!(
                "reshape {:?} to {rows}x{cols}",
                va.shape()
            )));
        }
        let out = Tensor::from_raw(rows, cols, va.data.clone());
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.cols {
            return Err(ModtError::invalid(format!(
                "slice_cols {start}..{end} of {} columns",
                va.cols
            )));
        }
        let out = Tensor::from_fn(va.rows, end - start, |r, c| va.get(r, start + c));
        Ok(self.push_op(out, Op::SliceCols { x: a, start }, &[a]))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.values2(a, b);
        if va.rows != vb.rows {
            return Err(ModtError::invalid("concat_cols row mismatch"));
        }
        let out = Tensor::from_fn(va.rows, va.cols + vb.cols, |r, c| {
            if c < va.cols {
                va.get(r, c)
            } else {
                vb.get(r, c - va.cols)
            }
        });
        Ok(self.push_op(out, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len().max(1) as f64;
        let out = Tensor::scalar(va.sum() / n);
        self.push_op(out, Op::Mean(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.shape() != (1, 1) {
            return Err(ModtError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, matmul_t_raw(&g, vb));
                    }
                    if nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, matmul_raw(&va.transpose(), &g));
                    }
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, matmul_raw(&g, vb));
                    }
                    if nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, matmul_raw(&g.transpose(), va));
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    accumulate(&mut grads, *a, g.zip(vb, |x, y| x * y));
                    accumulate(&mut grads, *b, g.zip(va, |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gr.data[c] += g.get(r, c);
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let (va, vr) = (&nodes[a.0].value, &nodes[row.0].value);
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gr.data[c] += g.get(r, c) * va.get(r, c);
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    let ga = Tensor::from_fn(g.rows, g.cols, |r, c| g.get(r, c) * vr.data[c]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.map(|v| v * k)),
                Op::ScaleBy(a, s) => {
                    let (va, vs) = (&nodes[a.0].value, &nodes[s.0].value);
                    let gs = g.data.iter().zip(&va.data).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads, *s, Tensor::scalar(gs));
                    let k = vs.data[0];
                    accumulate(&mut grads, *a, g.map(|v| v * k));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip(y, |gv, yv| gv * (1.0 - yv * yv))),
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip(y, |gv, yv| gv * yv)),
                Op::Ln(a) => {
                    let va = &nodes[a.0].value;
                    let ga = g.zip(va, |gv, x| if x > LN_FLOOR { gv / x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let va = &nodes[a.0].value;
                    let ga = g.zip(va, |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => accumulate(&mut grads, *a, g.zip(y, |gv, s| gv * s * (1.0 - s))),
                Op::Softplus(a) => {
                    let va = &nodes[a.0].value;
                    accumulate(&mut grads, *a, g.zip(va, |gv, x| gv * sigmoid(x)));
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Vec::with_capacity(g.len());
                    for r in 0..g.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        ga.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                    }
                    accumulate(&mut grads, *a, Tensor::from_raw(g.rows, g.cols, ga));
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = Vec::with_capacity(g.len());
                    for r in 0..g.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let total: f64 = gr.iter().sum();
                        ga.extend(gr.iter().zip(yr).map(|(gv, lv)| gv - lv.exp() * total));
                    }
                    accumulate(&mut grads, *a, Tensor::from_raw(g.rows, g.cols, ga));
                }
                Op::LayerNormRows { x, inv_std } => {
                    let n = g.cols as f64;
                    let mut ga = Vec::with_capacity(g.len());
                    for r in 0..g.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        ga.extend(
                            gr.iter()
                                .zip(yr)
                                .map(|(gv, yv)| inv_std[r] * (gv - mg - yv * mgy)),
                        );
                    }
                    accumulate(&mut grads, *x, Tensor::from_raw(g.rows, g.cols, ga));
                }
                Op::NormalizeRows { x, norms } => {
                    let mut ga = Vec::with_capacity(g.len());
                    for r in 0..g.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        if norms[r] == 0.0 {
                            ga.extend(std::iter::repeat_n(0.0, g.cols));
                            continue;
                        }
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        ga.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / norms[r]));
                    }
                    accumulate(&mut grads, *x, Tensor::from_raw(g.rows, g.cols, ga));
                }
                Op::ClampUnit(a) => {
                    let va = &nodes[a.0].value;
                    let ga = g.zip(va, |gv, x| if x.abs() <= 1.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows { x, idx } => {
                    let (rows, cols) = nodes[x.0].value.shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for (out_r, src) in idx.iter().enumerate() {
                        if let Some(src) = src {
                            for c in 0..cols {
                                ga.data[src * cols + c] += g.get(out_r, c);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, ga);
                }
                Op::MaxPoolGroups { x, argmax } => {
                    let (rows, cols) = nodes[x.0].value.shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for (flat, &src) in argmax.iter().enumerate() {
                        let c = flat % cols;
                        ga.data[src * cols + c] += g.data[flat];
                    }
                    accumulate(&mut grads, *x, ga);
                }
                Op::PointwiseMlp { x, w_in, w_out, hidden } => {
                    let (vx, wi, wo) = (&nodes[x.0].value, &nodes[w_in.0].value, &nodes[w_out.0].value);
                    let c = wi.cols;
                    let mut gx = Vec::with_capacity(vx.len());
                    let mut gi = vec![0.0; c];
                    let mut go = vec![0.0; c];
                    for (i, (&xv, &gv)) in vx.data.iter().zip(&g.data).enumerate() {
                        let hs = &hidden[i * c..(i + 1) * c];
                        let mut dx = 0.0;
                        for h in 0..c {
                            let t = hs[h];
                            go[h] += gv * t;
                            let d = gv * wo.data[h] * (1.0 - t * t);
                            gi[h] += d * xv;
                            dx += d * wi.data[h];
                        }
                        gx.push(dx);
                    }
                    accumulate(&mut grads, *w_in, Tensor::from_raw(1, c, gi));
                    accumulate(&mut grads, *w_out, Tensor::from_raw(c, 1, go));
                    accumulate(&mut grads, *x, Tensor::from_raw(vx.rows, vx.cols, gx));
                }
                Op::Reshape(a) => {
                    let (rows, cols) = nodes[a.0].value.shape();
                    accumulate(&mut grads, *a, Tensor::from_raw(rows, cols, g.data));
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = nodes[x.0].value.shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.data[r * cols + start + c] = g.get(r, c);
                        }
                    }
                    accumulate(&mut grads, *x, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[a.0].value.cols;
                    let cb = nodes[b.0].value.cols;
                    let ga = Tensor::from_fn(g.rows, ca, |r, c| g.get(r, c));
                    let gb = Tensor::from_fn(g.rows, cb, |r, c| g.get(r, ca + c));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sum(a) => {
                    let (rows, cols) = nodes[a.0].value.shape();
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.data[0]));
                }
                Op::Mean(a) => {
                    let (rows, cols) = nodes[a.0].value.shape();
                    let n = (rows * cols).max(1) as f64;
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.data[0] / n));
                }
            }
            // Interior gradients were taken above; only leaf gradients remain.
        }

        grads.resize(nodes.len(), None);
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    let partial = finite_difference_at(f, x, h, &all)?;
    Ok(Tensor::from_raw(x.rows, x.cols, partial))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for the flat
/// indices `idx` only.
pub fn finite_difference_at<F>(mut f: F, x: &Tensor, h: f64, idx: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(ModtError::invalid("finite difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(idx.len());
    for &i in idx {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe)?;
        probe.data[i] = orig - h;
        let minus = f(&probe)?;
        probe.data[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Gradient-check error for one element: relative when `|analytic| >= abs_floor`,
/// absolute otherwise.
pub fn gradient_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < abs_floor {
        diff
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks `build(tape, x)` against central differences for every input.
    fn check_unary(build: impl Fn(&Tape, Var) -> Var, x: &Tensor) {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let loss = build(&tape, v);
        let analytic = tape.backward(loss).unwrap().get(v);
        let numeric = finite_difference_gradient(
            |p| {
                let t = Tape::new();
                let v = t.constant(p.clone());
                Ok(t.value(build(&t, v)).item())
            },
            x,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let err = gradient_error(*a, *n, 1e-6);
            assert!(err < 1e-4, "analytic {a} numeric {n} err {err}");
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_rows(&Tensor::from_rows(&[[2.5, 2.5, 2.5]]).unwrap()).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax_rows(&Tensor::from_rows(&[[0.3, 1.7]]).unwrap()).unwrap();
        let b = softmax_rows(&Tensor::from_rows(&[[0.3 + 5.0, 1.7 + 5.0]]).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_row() {
        let s = softmax_rows(&Tensor::from_rows(&[[0.0, 2f64.ln()]]).unwrap()).unwrap();
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax_rows(&Tensor::zeros(2, 0)).is_err());
        assert!(softmax_rows(&Tensor::zeros(0, 0)).is_err());
    }

    #[test]
    fn softmax_large_values_stay_finite() {
        let s = softmax_rows(&Tensor::from_rows(&[[1000.0, 999.0, -1000.0]]).unwrap()).unwrap();
        assert!(s.is_finite());
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        assert_eq!(tape.backward(y).unwrap().get(x).item(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap().get(x);
        assert_eq!(g, Tensor::zeros(1, 2));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Tensor::from_rows(&[[0.5, -1.0], [2.0, 3.0]]).unwrap();
        let g = finite_difference_gradient(|p| Ok(p.sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_of_square() {
        let g = finite_difference_gradient(|p| Ok(p.item() * p.item()), &Tensor::scalar(3.0), 1e-5)
            .unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn fd_rejects_bad_step() {
        assert!(finite_difference_gradient(|p| Ok(p.sum()), &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn softmax_sum_of_squares_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 3, 3);
        check_unary(
            |t, v| {
                let s = t.softmax_rows(v).unwrap();
                let sq = t.mul(s, s);
                t.sum(sq)
            },
            &x,
        );
    }

    #[test]
    fn every_op_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = random(&mut rng, 4, 3);
            let w = random(&mut rng, 3, 5);
            let other = random(&mut rng, 4, 3);
            let row = random(&mut rng, 1, 3);
            let pos = x.map(|v| v.abs() + 0.1);

            check_unary(|t, v| { let c = t.constant(w.clone()); let y = t.matmul(v, c).unwrap(); let y = t.tanh(y); t.sum(y) }, &x);
            check_unary(|t, v| { let o = t.constant(other.clone()); let y = t.matmul_t(v, o).unwrap(); let s = t.mul(y, y); t.sum(s) }, &x);
            check_unary(|t, v| { let o = t.constant(other.clone()); let y = t.matmul_t(o, v).unwrap(); let s = t.exp(y); t.mean(s) }, &x);
            check_unary(|t, v| { let y = t.transpose(v); let c = t.constant(other.transpose()); let y = t.mul(y, c); let s = t.mul(y, y); t.sum(s) }, &x);
            check_unary(|t, v| { let o = t.constant(other.clone()); let y = t.sub(v, o).unwrap(); let y = t.abs(y); t.sum(y) }, &x);
            check_unary(|t, v| { let r = t.constant(row.clone()); let y = t.mul_row(v, r).unwrap(); let y = t.add_row(y, r).unwrap(); let s = t.mul(y, y); t.sum(s) }, &x);
            check_unary(|t, v| { let r = t.param(x.clone()); let y = t.mul_row(r, v).unwrap(); t.sum(y) }, &row);
            check_unary(|t, v| { let s = t.slice_cols(v, 0, 1).unwrap(); let s = t.reshape(s, 1, 4).unwrap(); let y = t.scale_by(t.constant(x.clone()), t.matmul(s, t.constant(Tensor::filled(4, 1, 0.3))).unwrap()).unwrap(); let y = t.tanh(y); t.sum(y) }, &x);
            check_unary(|t, v| { let y = t.ln(v); t.sum(y) }, &pos);
            check_unary(|t, v| { let y = t.sigmoid(v); let y = t.mul(y, y); t.sum(y) }, &x);
            check_unary(|t, v| { let y = t.softplus(v); let y = t.scale(y, 1.7); let y = t.add_scalar(y, 2.0); let y = t.mul(y, y); t.sum(y) }, &x);
            check_unary(|t, v| { let y = t.log_softmax_rows(v).unwrap(); let c = t.constant(other.clone()); let y = t.mul(y, c); t.sum(y) }, &x);
            check_unary(|t, v| { let y = t.layer_norm_rows(v, 1e-12).unwrap(); let c = t.constant(other.clone()); let y = t.mul(y, c); t.sum(y) }, &x);
            check_unary(|t, v| { let y = t.normalize_rows(v, 1e-12); let c = t.constant(other.clone()); let y = t.mul(y, c); t.sum(y) }, &x);
            check_unary(|t, v| { let y = t.scale(v, 0.5); let y = t.clamp_unit(y); let y = t.mul(y, y); t.sum(y) }, &x);
            check_unary(|t, v| { let y = t.gather_rows(v, vec![Some(2), None, Some(2), Some(0)]).unwrap(); let y = t.mul(y, y); t.sum(y) }, &x);
            check_unary(|t, v| { let y = t.max_pool_groups(v, 2).unwrap(); let y = t.mul(y, y); t.sum(y) }, &x);
            check_unary(|t, v| { let wi = t.constant(row.clone()); let wo = t.constant(row.transpose()); let y = t.pointwise_mlp(v, wi, wo).unwrap(); let y = t.mul(y, y); t.sum(y) }, &x);
            check_unary(|t, v| { let wo = t.constant(row.transpose()); let y = t.pointwise_mlp(t.constant(x.clone()), v, wo).unwrap(); let y = t.mul(y, y); t.sum(y) }, &row);
            check_unary(|t, v| { let wi = t.constant(row.clone()); let y = t.pointwise_mlp(t.constant(x.clone()), wi, v).unwrap(); let y = t.mul(y, y); t.sum(y) }, &row.transpose());
            check_unary(|t, v| { let y = t.concat_cols(v, v).unwrap(); let y = t.slice_cols(y, 2, 5).unwrap(); let y = t.mul(y, y); t.sum(y) }, &x);
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let a = tape.mul(x, x);
        let b = tape.add(a, x).unwrap();
        let c = tape.mul(b, x);
        // c = x^3 + x^2, dc/dx = 3x^2 + 2x = 16
        assert!((tape.backward(c).unwrap().get(x).item() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let x = tape.constant(random(&mut rng, 5, 64));
        let y = tape.value(tape.layer_norm_rows(x, 1e-12).unwrap());
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tensor_rejects_nan() {
        assert!(Tensor::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(1, 2, vec![1.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-15.0f64..15.0, 12)) {
            let s = softmax_rows(&Tensor::new(3, 4, vals.clone()).unwrap()).unwrap();
            for r in 0..3 {
                let total: f64 = s.row(r).iter().sum();
                proptest::prop_assert!((total - 1.0).abs() < 1e-9);
                for &v in s.row(r) {
                    proptest::prop_assert!(v > 0.0 && v < 1.0);
                }
            }
            let again = softmax_rows(&Tensor::new(3, 4, vals).unwrap()).unwrap();
            proptest::prop_assert_eq!(s, again);
        }
    }
}
