use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::mask::Mask;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of operations the tape can record. Every variant has a
/// gradient rule in [`Tape::backward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale,
    Exp,
    Ln,
    Sqrt,
    Gelu,
    MaskedSoftmax,
    LayerNorm,
    Im2Col,
    Sum,
    Mean,
    Reshape,
    Transpose,
    Concat,
    SliceRows,
    SliceCols,
    Embedding,
    L1Loss,
    MseLoss,
}

impl Primitive {
    pub const ALL: [Primitive; 25] = [
        Primitive::Leaf,
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::AddRow,
        Primitive::MulRow,
        Primitive::Scale,
        Primitive::Exp,
        Primitive::Ln,
        Primitive::Sqrt,
        Primitive::Gelu,
        Primitive::MaskedSoftmax,
        Primitive::LayerNorm,
        Primitive::Im2Col,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Reshape,
        Primitive::Transpose,
        Primitive::Concat,
        Primitive::SliceRows,
        Primitive::SliceCols,
        Primitive::Embedding,
        Primitive::L1Loss,
        Primitive::MseLoss,
    ];
}

/// Geometry of a square-kernel 2-D convolution over an `[H, W, C]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0
            || self.kernel == 0
            || self.height + 2 * self.padding < self.kernel
            || self.width + 2 * self.padding < self.kernel
        {
            return Err(TensorError::Invalid(format!("bad conv geometry {self:?}")));
        }
        Ok(())
    }

    /// Source index into the `[H, W, C]` input for (output pixel, patch column),
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, out_pix: usize, col: usize) -> Option<usize> {
        let ow = self.out_width();
        let (oy, ox) = (out_pix / ow, out_pix % ow);
        let c = col % self.channels;
        let kx = (col / self.channels) % self.kernel;
        let ky = col / (self.channels * self.kernel);
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize * self.width + x as usize) * self.channels + c)
        }
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, S),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Gelu(Var),
    MaskedSoftmax(Var),
    LayerNorm(Var, Vec<S>),
    Im2Col(Var, ConvGeometry),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Embedding(Var, Vec<usize>),
    L1Loss(Var, Var),
    MseLoss(Var, Var),
}

impl<S> Op<S> {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf(_) => Primitive::Leaf,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::AddRow(..) => Primitive::AddRow,
            Op::MulRow(..) => Primitive::MulRow,
            Op::Scale(..) => Primitive::Scale,
            Op::Exp(_) => Primitive::Exp,
            Op::Ln(_) => Primitive::Ln,
            Op::Sqrt(_) => Primitive::Sqrt,
            Op::Gelu(_) => Primitive::Gelu,
            Op::MaskedSoftmax(_) => Primitive::MaskedSoftmax,
            Op::LayerNorm(..) => Primitive::LayerNorm,
            Op::Im2Col(..) => Primitive::Im2Col,
            Op::Sum(_) => Primitive::Sum,
            Op::Mean(_) => Primitive::Mean,
            Op::Reshape(_) => Primitive::Reshape,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Concat(..) => Primitive::Concat,
            Op::SliceRows(..) => Primitive::SliceRows,
            Op::SliceCols(..) => Primitive::SliceCols,
            Op::Embedding(..) => Primitive::Embedding,
            Op::L1Loss(..) => Primitive::L1Loss,
            Op::MseLoss(..) => Primitive::MseLoss,
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records primitive applications in insertion order; inputs always precede
/// the node that consumes them. One tape serves one forward/backward pass.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires grad.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    leaves: HashMap<Var, Tensor<S>>,
    params: Vec<(ParamId, Tensor<S>)>,
}

impl<S: Real> Gradients<S> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&var)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Gradient for `id`, or zeros of the parameter's shape when the parameter
    /// never reached the loss.
    pub fn param_or_zeros(&self, store: &ParamStore<S>, id: ParamId) -> Tensor<S> {
        self.param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.params.iter().map(|(p, t)| (*p, t))
    }
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn primitive(&self, v: Var) -> Primitive {
        self.nodes[v.0].op.primitive()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if v.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVar(v.0));
        }
        Ok(())
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        let t = t.with_requires_grad(requires_grad);
        self.push(t, Op::Leaf(None), requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf(Some(id)), true);
        self.params.insert(id, v);
        v
    }

    /// Makes later [`param`](Self::param) calls for `id` return `var`.
    pub fn bind_param(&mut self, id: ParamId, var: Var) -> Result<()> {
        self.check(var)?;
        self.params.insert(id, var);
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).map(f);
        let ng = self.ng(x);
        Ok(self.push(v, op, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    /// 2-D matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        self.check(x)?;
        self.check(r)?;
        let (_, cols) = self.value(x).dims2();
        if self.value(r).numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(r).to_vec(),
            });
        }
        let rv = self.value(r).data();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(cols.max(1)) {
            for (&a, &b) in row.iter().zip(rv) {
                data.push(f(a, b));
            }
        }
        Tensor::new(self.shape(x), data)
    }

    /// `x[.., n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", x, b, |a, b| a + b)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddRow(x, b), ng))
    }

    /// `x[.., n] * g[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", x, g, |a, b| a * b)?;
        let ng = self.ng(x) || self.ng(g);
        Ok(self.push(t, Op::MulRow(x, g), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::lit(c);
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, S::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, S::ln, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, S::sqrt, Op::Sqrt(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    /// Softmax along the last axis restricted to the visible keys of each row.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        self.check(x)?;
        let (rows, cols) = self.value(x).dims2();
        if mask.rows() != rows || mask.cols() != cols || self.value(x).ndim() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let ok = kernels::masked_softmax_row(
                &xv[r * cols..(r + 1) * cols],
                mask.row(r),
                &mut out[r * cols..(r + 1) * cols],
            );
            if !ok {
                return Err(TensorError::NoVisibleKeys { row: r });
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MaskedSoftmax(x), ng))
    }

    /// Normalizes each row (last axis) to zero mean, unit variance. No affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let (rows, cols) = self.value(x).dims2();
        let eps = S::lit(eps);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); rows * cols];
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            inv.push(kernels::layer_norm_row(
                &xv[r * cols..(r + 1) * cols],
                eps,
                &mut out[r * cols..(r + 1) * cols],
            ));
        }
        let t = Tensor::new(self.shape(x), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::LayerNorm(x, inv), ng))
    }

    /// Unfolds an `[H, W, C]` input into `[Ho·Wo, k·k·C]` patch rows.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        self.check(x)?;
        geom.validate()?;
        let expect = [geom.height, geom.width, geom.channels];
        if self.shape(x) != expect {
            return Err(TensorError::ShapeMismatch {
                op: "im2col",
                lhs: self.shape(x).to_vec(),
                rhs: expect.to_vec(),
            });
        }
        let rows = geom.out_height() * geom.out_width();
        let cols = geom.patch_len();
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                if let Some(src) = geom.source(r, c) {
                    out[r * cols + c] = xv[src];
                }
            }
        }
        let t = Tensor::new(&[rows, cols], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Im2Col(x, geom), ng))
    }

    /// Convolution as im2col followed by a matmul and bias. `w` is
    /// `[k·k·C, C_out]`; the result is `[Ho, Wo, C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let cols = self.im2col(x, geom)?;
        let y = self.matmul(cols, w)?;
        let y = self.add_row(y, b)?;
        let c_out = self.shape(y)[1];
        self.reshape(y, &[geom.out_height(), geom.out_width(), c_out])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(acc), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let n = S::lit(self.value(x).numel() as f64);
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(acc / n), Op::Mean(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        if self.value(x).ndim() != 2 {
            return Err(TensorError::Invalid("transpose expects a 2-D tensor".into()));
        }
        let (r, c) = self.value(x).dims2();
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Transpose(x), ng))
    }

    /// Concatenates 2-D tensors along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::Invalid("concat needs parts and axis 0|1".into()));
        }
        for &p in parts {
            self.check(p)?;
            if self.value(p).ndim() != 2 {
                return Err(TensorError::Invalid("concat expects 2-D tensors".into()));
            }
        }
        let first = self.shape(parts[0]).to_vec();
        let other = 1 - axis;
        for &p in &parts[1..] {
            if self.shape(p)[other] != first[other] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let t = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
            let mut data = Vec::with_capacity(rows * first[1]);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(&[rows, first[1]], data)?
        } else {
            let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
            let rows = first[0];
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(&[rows, cols], data)?
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.value(x).dims2();
        if len == 0 || start + len > r || self.value(x).ndim() != 2 {
            return Err(TensorError::Invalid(format!(
                "slice_rows {start}+{len} out of {r} rows"
            )));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(&[len, c], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceRows(x, start), ng))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.value(x).dims2();
        if len == 0 || start + len > c || self.value(x).ndim() != 2 {
            return Err(TensorError::Invalid(format!(
                "slice_cols {start}+{len} out of {c} cols"
            )));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(&[r, len], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceCols(x, start), ng))
    }

    /// Selects rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.check(table)?;
        let (v, d) = self.value(table).dims2();
        if indices.is_empty() || indices.iter().any(|&i| i >= v) {
            return Err(TensorError::Invalid(format!(
                "embedding index out of range for table of {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.value(table).row(i));
        }
        let t = Tensor::new(&[indices.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(t, Op::Embedding(table, indices.to_vec()), ng))
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let mut acc = S::zero();
        for (&p, &t) in self.value(pred).data().iter().zip(self.value(target).data()) {
            acc += (p - t).abs();
        }
        let n = S::lit(self.value(pred).numel() as f64);
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(acc / n), Op::L1Loss(pred, target), ng))
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let mut acc = S::zero();
        for (&p, &t) in self.value(pred).data().iter().zip(self.value(target).data()) {
            let d = p - t;
            acc += d * d;
        }
        let n = S::lit(self.value(pred).numel() as f64);
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(acc / n), Op::MseLoss(pred, target), ng))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: its nodes are
    /// dropped and further use returns [`TensorError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf(_) = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let mut leaves = HashMap::new();
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(pid) = node.op {
                if !node.needs_grad {
                    continue;
                }
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![S::zero(); node.value.numel()]);
                let t = Tensor::new(node.value.shape(), g)?;
                if let Some(pid) = pid {
                    params.push((pid, t.clone()));
                }
                leaves.insert(Var(i), t);
            }
        }
        params.sort_by_key(|(p, _)| *p);
        self.nodes.clear();
        self.params.clear();
        self.consumed = true;
        Ok(Gradients { leaves, params })
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        // Accumulates into an input's gradient buffer, allocating on first use.
        fn slot<S: Real>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut Vec<S> {
            grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
        }
        let numel = |v: Var| self.nodes[v.0].value.numel();

        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let buf = slot(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, val(*b), buf, m, k, n);
                }
                if wants(*b) {
                    let buf = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(val(*a), g, buf, m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                if wants(*a) {
                    for (o, &gv) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if wants(*b) {
                    for (o, &gv) in slot(grads, *b, g.len()).iter_mut().zip(g) {
                        *o += sign * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    for ((o, &gv), &y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    for ((o, &gv), &x) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let cols = numel(*b);
                if wants(*x) {
                    for (o, &gv) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if wants(*b) {
                    let buf = slot(grads, *b, cols);
                    for row in g.chunks(cols) {
                        for (o, &gv) in buf.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::MulRow(x, r) => {
                let cols = numel(*r);
                let (xv, rv) = (val(*x), val(*r));
                if wants(*x) {
                    let buf = slot(grads, *x, g.len());
                    for (j, (o, &gv)) in buf.iter_mut().zip(g).enumerate() {
                        *o += gv * rv[j % cols];
                    }
                }
                if wants(*r) {
                    let buf = slot(grads, *r, cols);
                    for (j, (&gv, &xj)) in g.iter().zip(xv).enumerate() {
                        buf[j % cols] += gv * xj;
                    }
                }
            }
            Op::Scale(x, c) => {
                for (o, &gv) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                    *o += gv * *c;
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                for ((o, &gv), &yv) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(y) {
                    *o += gv * yv;
                }
            }
            Op::Ln(x) => {
                let xv = val(*x);
                for ((o, &gv), &v) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    *o += gv / v;
                }
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                let two = S::lit(2.0);
                for ((o, &gv), &yv) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(y) {
                    *o += gv / (two * yv);
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                for ((o, &gv), &v) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    *o += gv * kernels::gelu_grad(v);
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let (_, cols) = node.value.dims2();
                let buf = slot(grads, *x, g.len());
                for ((yr, gr), br) in y.chunks(cols).zip(g.chunks(cols)).zip(buf.chunks_mut(cols)) {
                    let mut dot = S::zero();
                    for (&yv, &gv) in yr.iter().zip(gr) {
                        dot += yv * gv;
                    }
                    for ((o, &yv), &gv) in br.iter_mut().zip(yr).zip(gr) {
                        // hidden keys have y = 0 exactly and receive nothing
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm(x, inv) => {
                let y = node.value.data();
                let (_, cols) = node.value.dims2();
                let n = S::lit(cols as f64);
                let buf = slot(grads, *x, g.len());
                for (((yr, gr), br), &s) in y
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(buf.chunks_mut(cols))
                    .zip(inv.iter())
                {
                    let mut mg = S::zero();
                    let mut mgy = S::zero();
                    for (&yv, &gv) in yr.iter().zip(gr) {
                        mg += gv;
                        mgy += gv * yv;
                    }
                    mg /= n;
                    mgy /= n;
                    for ((o, &yv), &gv) in br.iter_mut().zip(yr).zip(gr) {
                        *o += s * (gv - mg - yv * mgy);
                    }
                }
            }
            Op::Im2Col(x, geom) => {
                let cols = geom.patch_len();
                let buf = slot(grads, *x, numel(*x));
                for (idx, &gv) in g.iter().enumerate() {
                    if let Some(src) = geom.source(idx / cols, idx % cols) {
                        buf[src] += gv;
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                for o in slot(grads, *x, numel(*x)).iter_mut() {
                    *o += gv;
                }
            }
            Op::Mean(x) => {
                let gv = g[0] / S::lit(numel(*x) as f64);
                for o in slot(grads, *x, numel(*x)).iter_mut() {
                    *o += gv;
                }
            }
            Op::Reshape(x) => {
                for (o, &gv) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                    *o += gv;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.nodes[x.0].value.dims2();
                let buf = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (_, out_cols) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.nodes[p.0].value.dims2();
                    if wants(p) {
                        let buf = slot(grads, p, pr * pc);
                        if *axis == 0 {
                            for (o, &gv) in buf.iter_mut().zip(&g[offset * out_cols..]) {
                                *o += gv;
                            }
                        } else {
                            for r in 0..pr {
                                let src = &g[r * out_cols + offset..r * out_cols + offset + pc];
                                for (o, &gv) in buf[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                    *o += gv;
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::SliceRows(x, start) => {
                let (_, c) = self.nodes[x.0].value.dims2();
                let buf = slot(grads, *x, numel(*x));
                for (o, &gv) in buf[start * c..].iter_mut().zip(g) {
                    *o += gv;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.nodes[x.0].value.dims2();
                let (_, len) = node.value.dims2();
                let buf = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..len {
                        buf[i * c + start + j] += g[i * len + j];
                    }
                }
            }
            Op::Embedding(table, indices) => {
                let (_, d) = self.nodes[table.0].value.dims2();
                let buf = slot(grads, *table, numel(*table));
                for (row, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        buf[ix * d + j] += g[row * d + j];
                    }
                }
            }
            Op::L1Loss(p, t) => {
                let n = S::lit(numel(*p) as f64);
                let gv = g[0] / n;
                let (pv, tv) = (val(*p), val(*t));
                let sign = |d: S| {
                    if d > S::zero() {
                        S::one()
                    } else if d < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                };
                if wants(*p) {
                    let buf = slot(grads, *p, pv.len());
                    for ((o, &a), &b) in buf.iter_mut().zip(pv).zip(tv) {
                        *o += gv * sign(a - b);
                    }
                }
                if wants(*t) {
                    let buf = slot(grads, *t, pv.len());
                    for ((o, &a), &b) in buf.iter_mut().zip(pv).zip(tv) {
                        *o -= gv * sign(a - b);
                    }
                }
            }
            Op::MseLoss(p, t) => {
                let n = S::lit(numel(*p) as f64);
                let gv = S::lit(2.0) * g[0] / n;
                let (pv, tv) = (val(*p), val(*t));
                if wants(*p) {
                    let buf = slot(grads, *p, pv.len());
                    for ((o, &a), &b) in buf.iter_mut().zip(pv).zip(tv) {
                        *o += gv * (a - b);
                    }
                }
                if wants(*t) {
                    let buf = slot(grads, *t, pv.len());
                    for ((o, &a), &b) in buf.iter_mut().zip(pv).zip(tv) {
                        *o -= gv * (a - b);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn linear_map_gradient_is_broadcast_vector() {
        // f(W) = sum(W·v): df/dW[i][j] = v[j]
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_fn(&[3, 2], |i| i as f64 * 0.5), true);
        let v = tape.constant(Tensor::new(&[2, 1], vec![2.0, -7.0]).unwrap());
        let y = tape.matmul(w, v).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[2.0, -7.0, 2.0, -7.0, 2.0, -7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.5), true);
        let y = tape.exp(x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.is_empty());
        assert_eq!(tape.backward(y).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn unreachable_params_get_zero_gradients() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::scalar(2.0));
        let b = store.add("b", Tensor::zeros(&[2, 3]));
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let _bv = tape.param(&store, b);
        let y = tape.mul(av, av).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(a).unwrap().item(), 4.0);
        assert!(g.param_or_zeros(&store, b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_softmax_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let empty = Mask::from_rows(&[&[true, false], &[false, false]]);
        assert_eq!(
            tape.masked_softmax(x, &empty).unwrap_err(),
            TensorError::NoVisibleKeys { row: 1 }
        );
        let wrong = Mask::full(2, 3);
        assert!(matches!(
            tape.masked_softmax(x, &wrong),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn inputs_precede_consumers() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]), true);
        let b = tape.exp(a).unwrap();
        let c = tape.add(a, b).unwrap();
        assert!(a.index() < b.index() && b.index() < c.index());
        assert_eq!(tape.primitive(c), Primitive::Add);
    }
}
