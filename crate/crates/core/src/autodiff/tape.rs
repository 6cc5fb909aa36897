use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_t, raw_gemm, Tensor};

/// Lower clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows: `r x c -> 1 x c`.
    Rows,
    /// Reduce over columns: `r x c -> r x 1`.
    Cols,
}

/// A fixed linear map usable on the tape. Backward applies the transpose.
pub trait LinearOperator: Sync {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn apply_transpose(&self, g: &Tensor) -> Result<Tensor>;
}

enum Op<'a> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow { x: Var, bias: Var },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice { src: Var, r0: usize, c0: usize },
    Conv1d { x: Var, w: Var, width: usize },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    SoftmaxRows(Var),
    Max { src: Var, axis: Axis, argmax: Vec<usize> },
    Mean(Var),
    Sum(Var),
    Transpose(Var),
    Gather { table: Var, ids: Vec<Option<usize>> },
    RowDot(Var, Var),
    Linear { x: Var, op: &'a dyn LinearOperator },
    Bce { probs: Var, gold: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op<'a>,
    needs_grad: bool,
}

/// Records primitive operations in execution order so that a single reverse
/// sweep produces gradients for every leaf that asked for one.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients indexed by [`Var`].
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

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Tensor {
        self.take(v).unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op<'a>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf borrowing its storage.
    pub fn param(&mut self, t: &'a Tensor) -> Result<Var> {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Result<Var> {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Result<Var> {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes on either side.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let v = matmul_t(self.value(a), ta, self.value(b), tb)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::AddScalar(a), ng)
    }

    /// Adds a `1 x c` bias to every row of an `r x c` input.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(Cow::Owned(out), Op::AddRow { x, bias }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", (rows, cols), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", (rows, cols), t.shape()));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let t = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + t.cols()].copy_from_slice(t.row(r));
            }
            c0 += t.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Sub-block `[r0, r0 + rows) x [c0, c0 + cols)`.
    pub fn slice(&mut self, src: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let s = self.value(src);
        if r0 + rows > s.rows() || c0 + cols > s.cols() {
            return Err(shape_err("slice", s.shape(), (r0 + rows, c0 + cols)));
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            out.row_mut(r)
                .copy_from_slice(&s.row(r0 + r)[c0..c0 + cols]);
        }
        let ng = self.ng(src);
        self.push(Cow::Owned(out), Op::Slice { src, r0, c0 }, ng)
    }

    /// Valid 1-D convolution along rows. `x` is `N x C` (positions by
    /// channels), `w` is `(width * C) x F`; output is `(N - width + 1) x F`.
    pub fn conv1d(&mut self, x: Var, w: Var, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c) = xv.shape();
        if width == 0 || n < width || wv.rows() != width * c {
            return Err(shape_err("conv1d", xv.shape(), wv.shape()));
        }
        let p = n - width + 1;
        let f = wv.cols();
        let mut out = Tensor::zeros(p, f);
        raw_gemm(p, width * c, f, xv.data(), c, 1, wv.data(), f, 1, out.data_mut(), f, 0.0);
        let ng = self.ng(x) || self.ng(w);
        self.push(Cow::Owned(out), Op::Conv1d { x, w, width }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(libm::tanh);
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Sigmoid(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(libm::log);
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Log(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::SoftmaxRows(a), ng)
    }

    /// Maximum over an axis; ties resolve to the lowest index.
    pub fn max(&mut self, src: Var, axis: Axis) -> Result<Var> {
        let s = self.value(src);
        let (out, argmax) = match axis {
            Axis::Rows => {
                let mut out = Tensor::zeros(1, s.cols());
                let mut arg = vec![0usize; s.cols()];
                for c in 0..s.cols() {
                    let mut best = f64::NEG_INFINITY;
                    for r in 0..s.rows() {
                        if s.get(r, c) > best {
                            best = s.get(r, c);
                            arg[c] = r;
                        }
                    }
                    out.set(0, c, best);
                }
                (out, arg)
            }
            Axis::Cols => {
                let mut out = Tensor::zeros(s.rows(), 1);
                let mut arg = vec![0usize; s.rows()];
                for r in 0..s.rows() {
                    let mut best = f64::NEG_INFINITY;
                    for (c, &v) in s.row(r).iter().enumerate() {
                        if v > best {
                            best = v;
                            arg[r] = c;
                        }
                    }
                    out.set(r, 0, best);
                }
                (out, arg)
            }
        };
        if s.is_empty() {
            return Err(shape_err("max", s.shape(), (1, 1)));
        }
        let ng = self.ng(src);
        self.push(Cow::Owned(out), Op::Max { src, axis, argmax }, ng)
    }

    /// Mean of all entries, as a `1 x 1` tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", t.shape(), (1, 1)));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Sum(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Transpose(a), ng)
    }

    /// Row lookup. `None` entries produce zero rows and receive no gradient.
    pub fn gather(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (i, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= t.rows() {
                    return Err(Error::OutOfVocab {
                        id,
                        vocab: t.rows(),
                    });
                }
                out.row_mut(i).copy_from_slice(t.row(id));
            }
        }
        let ng = self.ng(table);
        self.push(
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Row gather without padding.
    pub fn select_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ids: Vec<Option<usize>> = idx.iter().map(|&i| Some(i)).collect();
        self.gather(table, &ids)
    }

    /// Per-row dot product of two `r x c` inputs, giving `r x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(shape_err("row_dot", av.shape(), bv.shape()));
        }
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(Tensor::col_vector(data)), Op::RowDot(a, b), ng)
    }

    pub fn linear(&mut self, x: Var, op: &'a dyn LinearOperator) -> Result<Var> {
        let v = op.apply(self.value(x))?;
        let ng = self.ng(x);
        self.push(Cow::Owned(v), Op::Linear { x, op }, ng)
    }

    /// Multiplies by a fixed inverted-dropout mask; identity when `mask` is `None`.
    pub fn dropout(&mut self, x: Var, mask: Option<Tensor>) -> Result<Var> {
        match mask {
            None => Ok(x),
            Some(m) => {
                let mv = self.constant(m)?;
                self.mul(x, mv)
            }
        }
    }

    /// Summed multi-label binary cross-entropy over clamped probabilities.
    pub fn bce(&mut self, probs: Var, gold: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != gold.len() {
            return Err(shape_err("bce", p.shape(), (gold.len(), 1)));
        }
        let v = bce_value(p.data(), gold);
        let ng = self.ng(probs);
        self.push(
            Cow::Owned(Tensor::scalar(v)),
            Op::Bce {
                probs,
                gold: gold.to_vec(),
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.shape() != (1, 1) {
            return Err(shape_err("backward", ov.shape(), (1, 1)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.ng(a) {
                    // C = op(A) op(B): dA = G op(B)^T, transposed back when ta.
                    let da = if ta {
                        matmul_t(bv, tb, g, true)?
                    } else {
                        matmul_t(g, false, bv, !tb)?
                    };
                    accumulate(grads, a, da);
                }
                if self.ng(b) {
                    let db = if tb {
                        matmul_t(g, true, av, ta)?
                    } else {
                        matmul_t(av, !ta, g, false)?
                    };
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.ng(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.ng(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.ng(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.ng(b) {
                    accumulate(grads, b, g.scale(-1.0));
                }
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    accumulate(grads, a, g.zip_map(self.value(b), "mul", |x, y| x * y)?);
                }
                if self.ng(b) {
                    accumulate(grads, b, g.zip_map(self.value(a), "mul", |x, y| x * y)?);
                }
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.scale(s)),
            &Op::AddScalar(a) => accumulate(grads, a, g.clone()),
            &Op::AddRow { x, bias } => {
                if self.ng(x) {
                    accumulate(grads, x, g.clone());
                }
                if self.ng(bias) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(grads, bias, db);
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        accumulate(grads, p, g.slice_rows(r0, rows));
                    }
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.ng(p) {
                        let mut part = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            part.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        accumulate(grads, p, part);
                    }
                    c0 += cols;
                }
            }
            &Op::Slice { src, r0, c0 } => {
                let s = self.value(src);
                let mut full = Tensor::zeros(s.rows(), s.cols());
                for r in 0..g.rows() {
                    full.row_mut(r0 + r)[c0..c0 + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, src, full);
            }
            &Op::Conv1d { x, w, width } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (n, c) = xv.shape();
                let p = g.rows();
                let f = g.cols();
                if self.ng(w) {
                    let mut dw = Tensor::zeros(width * c, f);
                    raw_gemm(width * c, p, f, xv.data(), 1, c, g.data(), f, 1, dw.data_mut(), f, 0.0);
                    accumulate(grads, w, dw);
                }
                if self.ng(x) {
                    let mut dwin = Tensor::zeros(p, width * c);
                    raw_gemm(p, f, width * c, g.data(), f, 1, wv.data(), 1, f, dwin.data_mut(), width * c, 0.0);
                    let mut dx = Tensor::zeros(n, c);
                    for pos in 0..p {
                        let dst = &mut dx.data_mut()[pos * c..pos * c + width * c];
                        for (d, s) in dst.iter_mut().zip(dwin.row(pos)) {
                            *d += s;
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            &Op::Relu(a) => {
                let x = self.value(a);
                accumulate(grads, a, g.zip_map(x, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?);
            }
            &Op::Tanh(a) => {
                accumulate(grads, a, g.zip_map(y, "tanh", |gv, yv| gv * (1.0 - yv * yv))?);
            }
            &Op::Sigmoid(a) => {
                accumulate(grads, a, g.zip_map(y, "sigmoid", |gv, yv| gv * yv * (1.0 - yv))?);
            }
            &Op::Log(a) => {
                let x = self.value(a);
                accumulate(grads, a, g.zip_map(x, "log", |gv, xv| gv / xv)?);
            }
            &Op::SoftmaxRows(a) => {
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, a, dx);
            }
            Op::Max { src, axis, argmax } => {
                let s = self.value(*src);
                let mut dx = Tensor::zeros(s.rows(), s.cols());
                match axis {
                    Axis::Rows => {
                        for (c, &r) in argmax.iter().enumerate() {
                            dx.set(r, c, g.get(0, c));
                        }
                    }
                    Axis::Cols => {
                        for (r, &c) in argmax.iter().enumerate() {
                            dx.set(r, c, g.get(r, 0));
                        }
                    }
                }
                accumulate(grads, *src, dx);
            }
            &Op::Mean(a) => {
                let s = self.value(a);
                let v = g.item() / s.len() as f64;
                accumulate(grads, a, Tensor::filled(s.rows(), s.cols(), v));
            }
            &Op::Sum(a) => {
                let s = self.value(a);
                accumulate(grads, a, Tensor::filled(s.rows(), s.cols(), g.item()));
            }
            &Op::Transpose(a) => accumulate(grads, a, g.transpose()),
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut dt = Tensor::zeros(t.rows(), t.cols());
                for (i, id) in ids.iter().enumerate() {
                    if let Some(id) = *id {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                }
                accumulate(grads, *table, dt);
            }
            &Op::RowDot(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.ng(a) {
                    let mut da = bv.clone();
                    for r in 0..da.rows() {
                        let gr = g.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                    }
                    accumulate(grads, a, da);
                }
                if self.ng(b) {
                    let mut db = av.clone();
                    for r in 0..db.rows() {
                        let gr = g.get(r, 0);
                        db.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Linear { x, op } => accumulate(grads, x, op.apply_transpose(g)?),
            Op::Bce { probs, gold } => {
                let p = self.value(*probs);
                let gv = g.item();
                let data = p
                    .data()
                    .iter()
                    .zip(gold)
                    .map(|(&pv, &yv)| {
                        if pv > BCE_CLAMP && pv < 1.0 - BCE_CLAMP {
                            gv * (-yv / pv + (1.0 - yv) / (1.0 - pv))
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *probs, Tensor::from_vec(p.rows(), p.cols(), data)?);
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op<'_>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::AddRow { .. } => "add_row",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::Slice { .. } => "slice",
        Op::Conv1d { .. } => "conv1d",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Log(..) => "log",
        Op::SoftmaxRows(..) => "softmax",
        Op::Max { .. } => "max",
        Op::Mean(..) => "mean",
        Op::Sum(..) => "sum",
        Op::Transpose(..) => "transpose",
        Op::Gather { .. } => "gather",
        Op::RowDot(..) => "row_dot",
        Op::Linear { .. } => "linear",
        Op::Bce { .. } => "bce",
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - m);
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn bce_value(probs: &[f64], gold: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(gold)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p)
        })
        .sum::<f64>()
}
