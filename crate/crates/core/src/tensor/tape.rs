//! Reverse-mode differentiation by operation recording.
//!
//! Every forward operation appends one node holding its output value and
//! the information its backward rule needs. [`Tape::backward`] walks the
//! nodes once in reverse order, accumulating into parameter gradients.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{numel, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Negative slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    LeakyRelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    /// Mean over each whole channel, `C×H×W → C×1×1`.
    Global,
    /// Zero-padded `k×k` mean, stride 1, same extent. `k` must be odd.
    Local(usize),
}

/// Deliberately wrong backward rules, used as negative controls for
/// gradient checking.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Drops the `(1 - y)` factor of the sigmoid derivative.
    SigmoidBackward,
}

/// Restricted broadcasting for rank-3 `C×H×W` operands: one side may be
/// `C×1×1` (per-channel) or `1×H×W` (per-position).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Channel { hw: usize, rhs: bool },
    Spatial { hw: usize, rhs: bool },
}

impl Bcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Self, Vec<usize>)> {
        if a == b {
            return Ok((Bcast::Same, a.to_vec()));
        }
        let err = || Error::dim(op, format!("incompatible shapes {a:?} and {b:?}"));
        let (&[ac, ah, aw], &[bc, bh, bw]) = (a, b) else { return Err(err()) };
        let full = |c, h, w| (c, h, w) == (ac.max(bc), ah.max(bh), aw.max(bw));
        match ((ac, ah, aw), (bc, bh, bw)) {
            (_, (c, 1, 1)) if c == ac && full(ac, ah, aw) => Ok((Bcast::Channel { hw: ah * aw, rhs: true }, a.to_vec())),
            (_, (1, h, w)) if (h, w) == (ah, aw) => Ok((Bcast::Spatial { hw: ah * aw, rhs: true }, a.to_vec())),
            ((c, 1, 1), _) if c == bc => Ok((Bcast::Channel { hw: bh * bw, rhs: false }, b.to_vec())),
            ((1, h, w), _) if (h, w) == (bh, bw) => Ok((Bcast::Spatial { hw: bh * bw, rhs: false }, b.to_vec())),
            _ => Err(err()),
        }
    }

    /// Index into the (possibly) broadcast operand for output index `i`.
    #[inline]
    fn small(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Channel { hw, .. } => i / hw,
            Bcast::Spatial { hw, .. } => i % hw,
        }
    }

    /// Whether the right-hand operand is the broadcast one.
    fn rhs_small(self) -> bool {
        match self {
            Bcast::Same => true,
            Bcast::Channel { rhs, .. } | Bcast::Spatial { rhs, .. } => rhs,
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Add(Var, Var, Bcast),
    Sub(Var, Var),
    Mul(Var, Var, Bcast),
    Div(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, b: Var, axis: usize },
    Act(Var, Activation),
    Softmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GlobalPool(Var),
    LocalPool(Var, usize),
    Upsample(Var, usize),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Transpose(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Select { x: Var, axis: usize, indices: Vec<usize> },
    Sum(Var),
    Bce { pred: Var, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
    record: bool,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records operations for differentiation.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grads: Vec::new(), record: true, fault: None }
    }

    /// A tape that only evaluates; [`Tape::backward`] yields zero gradients.
    pub fn inference() -> Self {
        Self { record: false, ..Self::new() }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert_eq!(numel(value.shape()), value.len());
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Sign of every recorded ReLU / LeakyReLU input, in tape order. Two
    /// evaluations with different patterns straddle a point where the graph is
    /// not differentiable.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Act(x, Activation::Relu | Activation::LeakyRelu) = node.op {
                out.extend(self.data(x).iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Records a non-learnable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter; repeated calls for the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [k2, n]) = (self.value(a).dims2("matmul")?, self.value(b).dims2("matmul")?);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{:?} × {:?}", self.shape(a), self.shape(b))));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Cross-correlation of `x: C_in×H×W` with `w: C_out×C_in×kh×kw` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [c_in, h, wd] = self.value(x).dims3("conv2d")?;
        let geom = match *self.shape(w) {
            [c_out, ci, kh, kw] if ci == c_in => {
                if stride == 0 {
                    return Err(Error::Config("conv2d stride must be positive".into()));
                }
                let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
                if kh > ph || kw > pw {
                    return Err(Error::Config(format!("kernel {kh}×{kw} exceeds padded extent {ph}×{pw}")));
                }
                if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
                    return Err(Error::Config(format!(
                        "non-integral conv2d output: extent {h}×{wd}, kernel {kh}×{kw}, stride {stride}, pad {pad}"
                    )));
                }
                ConvGeom {
                    c_in,
                    h,
                    w: wd,
                    c_out,
                    kh,
                    kw,
                    stride,
                    pad,
                    h_out: (ph - kh) / stride + 1,
                    w_out: (pw - kw) / stride + 1,
                }
            }
            _ => {
                return Err(Error::dim("conv2d", format!("input {:?} with weight {:?}", self.shape(x), self.shape(w))));
            }
        };
        if self.shape(b) != [geom.c_out] {
            return Err(Error::dim("conv2d", format!("bias {:?} for {} output channels", self.shape(b), geom.c_out)));
        }
        let out = kernels::conv2d(self.data(x), self.data(w), self.data(b), &geom);
        Ok(self.push(Tensor::new(vec![geom.c_out, geom.h_out, geom.w_out], out)?, Op::Conv2d { x, w, b, geom }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, shape) = Bcast::resolve("add", self.shape(a), self.shape(b))?;
        let out = self.zip_bcast(a, b, bc, |x, y| x + y);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b, bc)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, shape) = Bcast::resolve("mul", self.shape(a), self.shape(b))?;
        let out = self.zip_bcast(a, b, bc, |x, y| x * y);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b, bc)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Sub(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x / y).collect();
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Div(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_bcast(&self, a: Var, b: Var, bc: Bcast, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (da, db) = (self.data(a), self.data(b));
        let n = da.len().max(db.len());
        if bc.rhs_small() {
            (0..n).map(|i| f(da[i], db[bc.small(i)])).collect()
        } else {
            (0..n).map(|i| f(da[bc.small(i)], db[i])).collect()
        }
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    /// Adds the vector `b` along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(b) != [shape[axis]] {
            return Err(Error::dim("add_bias", format!("bias {:?} along axis {axis} of {shape:?}", self.shape(b))));
        }
        let (_, len, inner) = kernels::axis_split(&shape, axis);
        let bd = self.data(b);
        let out = self.data(x).iter().enumerate().map(|(i, &v)| v + bd[(i / inner) % len]).collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias { x, b, axis }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let slope = T::lit(LEAKY_SLOPE);
        let value = self.value(x).map(|v| match kind {
            Activation::Sigmoid => T::lit(sigmoid(v.wide())),
            Activation::LeakyRelu => {
                if v > T::zero() {
                    v
                } else {
                    v * slope
                }
            }
            Activation::Relu => v.max(T::zero()),
        });
        self.push(value, Op::Act(x, kind))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let out = kernels::softmax(self.data(x), &shape, axis);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, axis)))
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", "rank-0 input"))?;
        if d == 0 {
            return Err(Error::dim("layer_norm", "zero-length normalized dimension"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("affine {:?}/{:?} for last dim {d}", self.shape(gain), self.shape(bias)),
            ));
        }
        let rows = self.value(x).len() / d;
        let (xd, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.wide()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.wide() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let xh = (v.wide() - mean) * rs;
                xhat.push(xh);
                out.push(T::lit(xh * g[j].wide() + b[j].wide()));
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    pub fn avg_pool(&mut self, x: Var, kind: Pool) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3("avg_pool")?;
        match kind {
            Pool::Global => {
                let out = self
                    .data(x)
                    .chunks(h * w)
                    .map(|p| T::lit(p.iter().map(|v| v.wide()).sum::<f64>() / (h * w) as f64))
                    .collect();
                Ok(self.push(Tensor::new(vec![c, 1, 1], out)?, Op::GlobalPool(x)))
            }
            Pool::Local(k) => {
                if k % 2 == 0 {
                    return Err(Error::Config(format!("local pooling window must be odd, got {k}")));
                }
                let out = kernels::box_mean(self.data(x), c, h, w, k);
                Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::LocalPool(x, k)))
            }
        }
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3("upsample_bilinear")?;
        if factor == 0 {
            return Err(Error::Config("upsampling factor must be at least 1".into()));
        }
        let out = kernels::upsample_bilinear(self.data(x), c, h, w, factor);
        Ok(self.push(Tensor::new(vec![c, h * factor, w * factor], out)?, Op::Upsample(x, factor)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agree = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::dim("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.data(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Permutes axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::dim("transpose", format!("permutation {perm:?} for shape {shape:?}")));
        }
        let out = kernels::transpose(self.data(x), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Transpose(x, perm.to_vec())))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("narrow", format!("{start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        Ok(self.push(Tensor::new(s, out)?, Op::Narrow { x, axis, start }))
    }

    /// Gathers `indices` along `axis` (repeats allowed).
    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::dim("select", format!("indices {indices:?} on axis {axis} of {shape:?}")));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&d[(o * full + i) * inner..(o * full + i + 1) * inner]);
            }
        }
        let mut s = shape;
        s[axis] = indices.len();
        Ok(self.push(Tensor::new(s, out)?, Op::Select { x, axis, indices: indices.to_vec() }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.wide()).sum();
        self.push(Tensor::scalar(T::lit(s)), Op::Sum(x))
    }

    /// Clipped binary cross-entropy summed over all elements:
    /// `Σ −[y·max(ln p, −100) + (1−y)·max(ln(1−p), −100)]`.
    pub fn bce_clipped(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim("bce_clipped", format!("pred {:?} vs target {:?}", self.shape(pred), target.shape())));
        }
        let s: f64 = self
            .data(pred)
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let (p, y) = (p.wide(), y.wide());
                -(y * p.ln().max(-100.0) + (1.0 - y) * (1.0 - p).ln().max(-100.0))
            })
            .sum();
        Ok(self.push(Tensor::scalar(T::lit(s)), Op::Bce { pred, target: target.data().to_vec() }))
    }

    /// Reverse sweep from the scalar `loss`. Gradients of parameter leaves are
    /// added to `store`; other gradients are available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], store: &mut ParamStore<T>) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::MatMul(a, b) => {
                let ([m, k], n) = (self.value(*a).dims2("matmul").unwrap(), self.shape(*b)[1]);
                add_into(grads, *a, kernels::matmul_nt(g, self.data(*b), m, n, k));
                add_into(grads, *b, kernels::matmul_tn(self.data(*a), g, m, k, n));
            }
            Op::Conv2d { x, w, b, geom } => {
                add_into(grads, *x, kernels::conv2d_grad_input(g, self.data(*w), geom));
                let (gw, gb) = kernels::conv2d_grad_params(g, self.data(*x), geom);
                add_into(grads, *w, gw);
                add_into(grads, *b, gb);
            }
            Op::Add(a, b, bc) => {
                let (full, small) = if bc.rhs_small() { (*a, *b) } else { (*b, *a) };
                add_into(grads, full, g.to_vec());
                add_into(grads, small, reduce_bcast(g, *bc, self.value(small).len(), |i| g[i]));
            }
            Op::Mul(a, b, bc) => {
                let (full, small) = if bc.rhs_small() { (*a, *b) } else { (*b, *a) };
                let (df, ds) = (self.data(full), self.data(small));
                add_into(grads, full, g.iter().enumerate().map(|(i, &gv)| gv * ds[bc.small(i)]).collect());
                add_into(grads, small, reduce_bcast(g, *bc, ds.len(), |i| g[i] * df[i]));
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g.to_vec());
                add_into(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                add_into(grads, *a, g.iter().zip(db).map(|(&gv, &bv)| gv / bv).collect());
                add_into(
                    grads,
                    *b,
                    g.iter().zip(da).zip(db).map(|((&gv, &av), &bv)| -gv * av / (bv * bv)).collect(),
                );
            }
            Op::Scale(x, c) => add_into(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::AddBias { x, b, axis } => {
                add_into(grads, *x, g.to_vec());
                let (_, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut acc = vec![0.0f64; len];
                for (i, &gv) in g.iter().enumerate() {
                    acc[(i / inner) % len] += gv.wide();
                }
                add_into(grads, *b, acc.into_iter().map(T::lit).collect());
            }
            Op::Act(x, kind) => {
                let xd = self.data(*x);
                let slope = T::lit(LEAKY_SLOPE);
                let gx = match kind {
                    Activation::Sigmoid => {
                        let faulty = self.fault == Some(Fault::SigmoidBackward);
                        g.iter()
                            .zip(y)
                            .map(|(&gv, &yv)| if faulty { gv * yv } else { gv * yv * (T::one() - yv) })
                            .collect()
                    }
                    Activation::LeakyRelu => {
                        g.iter().zip(xd).map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * slope }).collect()
                    }
                    Activation::Relu => {
                        g.iter().zip(xd).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect()
                    }
                };
                add_into(grads, *x, gx);
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + k;
                        let dot: f64 = (0..len).map(|j| g[idx(j)].wide() * y[idx(j)].wide()).sum();
                        for j in 0..len {
                            gx[idx(j)] = T::lit(y[idx(j)].wide() * (g[idx(j)].wide() - dot));
                        }
                    }
                }
                add_into(grads, *x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).len();
                let gd = self.data(*gain);
                let mut gg = vec![0.0f64; d];
                let mut gb = vec![0.0f64; d];
                let mut gx = Vec::with_capacity(g.len());
                for (r, rs) in rstd.iter().enumerate() {
                    let (gr, xr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let gv = gr[j].wide();
                        gg[j] += gv * xr[j];
                        gb[j] += gv;
                        let gh = gv * gd[j].wide();
                        m1 += gh;
                        m2 += gh * xr[j];
                    }
                    let (m1, m2) = (m1 / d as f64, m2 / d as f64);
                    for j in 0..d {
                        let gh = gr[j].wide() * gd[j].wide();
                        gx.push(T::lit(rs * (gh - m1 - xr[j] * m2)));
                    }
                }
                add_into(grads, *x, gx);
                add_into(grads, *gain, gg.into_iter().map(T::lit).collect());
                add_into(grads, *bias, gb.into_iter().map(T::lit).collect());
            }
            Op::GlobalPool(x) => {
                let n = self.value(*x).len();
                let hw = n / g.len();
                let inv = T::lit(1.0 / hw as f64);
                add_into(grads, *x, (0..n).map(|i| g[i / hw] * inv).collect());
            }
            Op::LocalPool(x, k) => {
                let [c, h, w] = self.value(*x).dims3("avg_pool").unwrap();
                add_into(grads, *x, kernels::box_mean(g, c, h, w, *k));
            }
            Op::Upsample(x, f) => {
                let [c, h, w] = self.value(*x).dims3("upsample").unwrap();
                add_into(grads, *x, kernels::upsample_bilinear_grad(g, c, h, w, *f));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    add_into(grads, p, gp);
                    offset += len;
                }
            }
            Op::Reshape(x) => add_into(grads, *x, g.to_vec()),
            Op::Transpose(x, perm) => {
                add_into(grads, *x, kernels::transpose(g, node.value.shape(), &kernels::inverse_perm(perm)));
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = kernels::axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                add_into(grads, *x, gx);
            }
            Op::Select { x, axis, indices } => {
                let (outer, full, inner) = kernels::axis_split(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); self.value(*x).len()];
                let mut src = g.chunks(inner);
                for o in 0..outer {
                    for &i in indices {
                        let chunk = src.next().expect("select gradient length");
                        for (dst, &v) in gx[(o * full + i) * inner..].iter_mut().zip(chunk) {
                            *dst += v;
                        }
                    }
                }
                add_into(grads, *x, gx);
            }
            Op::Sum(x) => add_into(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::Bce { pred, target } => {
                let g0 = g[0].wide();
                let cap = T::max_value().wide();
                let gp = self
                    .data(*pred)
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        let (p, y) = (p.wide(), y.wide());
                        let mut d = 0.0;
                        if y != 0.0 && p.ln() > -100.0 {
                            d -= y / p;
                        }
                        if y != 1.0 && (1.0 - p).ln() > -100.0 {
                            d += (1.0 - y) / (1.0 - p);
                        }
                        T::lit((g0 * d).clamp(-cap, cap))
                    })
                    .collect();
                add_into(grads, *pred, gp);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_bcast<T: Scalar>(g: &[T], bc: Bcast, small_len: usize, term: impl Fn(usize) -> T) -> Vec<T> {
    if bc == Bcast::Same {
        return (0..g.len()).map(term).collect();
    }
    let mut acc = vec![0.0f64; small_len];
    for i in 0..g.len() {
        acc[bc.small(i)] += term(i).wide();
    }
    acc.into_iter().map(T::lit).collect()
}
