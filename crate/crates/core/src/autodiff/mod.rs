//! A small define-by-run reverse-mode differentiation engine.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles together
//! with the forward value. [`Tape::backward`] walks the record in reverse
//! and returns gradients for every parameter bound with [`Tape::bind`].
//!
//! The operator set is deliberately closed: same-padded 2-D convolution,
//! dense affine maps, batch normalization, 2x2 max pooling, a handful of
//! elementwise nonlinearities and arithmetic, reductions, reshaping and
//! row/column selection, plus the two fuzzy-logic specific reductions
//! (generalized mean and batch min-max normalization).
//!
//! The engine is generic over the scalar width so the same graph runs in
//! `f32` for training and `f64` for gradient checks.

mod check;
mod kernels;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

pub use check::{finite_diff_check, finite_diff_check_f32, FdReport};
pub use params::{Entry, Gradients, ParameterSet};

use crate::error::{Error, Result};
use kernels::ConvGeom;

/// Floating-point scalar usable by the engine.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Epsilon inside batch-norm square roots.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How gradients flow through [`Tape::minmax_normalize`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormGrad {
    /// Exact derivative, including the dependence of min and max on inputs.
    #[default]
    Full,
    /// Treat the batch min and max as constants.
    FrozenStats,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Sigmoid(Var),
    Asinh(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    PowMean { x: Var, p: T, mean_pow: T },
    Reshape(Var),
    Rows { x: Var, start: usize },
    Cols { x: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, cols: Array2<T>, geom: ConvGeom, out_c: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: ArrayD<T>, inv_std: Vec<T>, batch_stats: bool },
    MinMax { x: Var, lo: usize, hi: usize, denom: T, degenerate: bool, mode: NormGrad },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddConst(..) => "add_const",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Sigmoid(..) => "sigmoid",
            Op::Asinh(..) => "asinh",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::PowMean { .. } => "pow_mean",
            Op::Reshape(..) => "reshape",
            Op::Rows { .. } => "rows",
            Op::Cols { .. } => "cols",
            Op::Concat(..) => "concat",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MinMax { .. } => "minmax_normalize",
        }
    }
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
}

/// Batch statistics observed by a training-mode batch norm, used to update
/// running buffers.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Trainable parameters registered on a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound on this tape")))
    }
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    nonfinite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(a: &[usize]) -> String {
    format!("{a:?}")
}

fn as2<T>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("rank checked by caller")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new(), nonfinite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        let id = self.nodes.len();
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().into_owned() };
        if self.nonfinite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.iter().next().copied().unwrap_or_else(T::zero)
    }

    /// Fails with the location of the first non-finite intermediate, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Leaf)
    }

    pub fn scalar_constant(&mut self, v: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    /// Registers a named parameter; its gradient is reported by `backward`.
    pub fn param(&mut self, name: &str, value: &ArrayD<T>) -> Var {
        let v = self.push(value.as_standard_layout().into_owned(), Op::Param);
        self.params.push((name.to_string(), v));
        v
    }

    /// Registers every trainable entry of `params`.
    pub fn bind(&mut self, params: &ParameterSet<T>) -> Bound {
        let mut vars = IndexMap::new();
        for (name, value) in params.trainable() {
            let v = self.param(name, value);
            vars.insert(name.to_string(), v);
        }
        Bound { vars }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b)))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a) / self.value(b);
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_const(neg, T::one())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(T::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(T::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| T::one() / (T::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn asinh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.asinh());
        self.push(v, Op::Asinh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Sum(a))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).sum() / T::lit(self.value(a).len() as f64);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Mean(a))
    }

    /// Mean over every axis but the first: `[n, ...] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() < 2 || x.shape()[0] == 0 {
            return Err(Error::shape("mean_rows", format!("need rank >= 2, got {}", shape_str(x.shape()))));
        }
        let n = x.shape()[0];
        let m = x.len() / n;
        let flat = x.view().into_shape_with_order((n, m)).expect("standard layout");
        let v = flat.sum_axis(Axis(1)).mapv(|s| s / T::lit(m as f64)).into_dyn();
        Ok(self.push(v, Op::MeanRows(a)))
    }

    /// Generalized mean `((1/n) sum x_i^p)^(1/p)` over all elements of a
    /// nonnegative tensor, shape `[1]`.
    pub fn pow_mean(&mut self, a: Var, p: T) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Domain("generalized mean over an empty set".into()));
        }
        if p < T::one() {
            return Err(Error::Domain(format!("generalized-mean exponent {p} < 1")));
        }
        let mean_pow = x.iter().map(|&v| v.powf(p)).sum::<T>() / T::lit(x.len() as f64);
        let y = mean_pow.powf(T::one() / p);
        Ok(self.push(ArrayD::from_elem(IxDyn(&[1]), y), Op::PowMean { x: a, p, mean_pow }))
    }

    /// Existential aggregation of truth values.
    pub fn exists(&mut self, a: Var, p: T) -> Result<Var> {
        self.pow_mean(a, p)
    }

    /// Universal aggregation of truth values: `1 - pow_mean(1 - a)`.
    pub fn forall(&mut self, a: Var, p: T) -> Result<Var> {
        let err = self.one_minus(a);
        let m = self.pow_mean(err, p)?;
        Ok(self.one_minus(m))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::shape("reshape", format!("{} into {}", shape_str(x.shape()), shape_str(shape))));
        }
        let v = x.to_shape(IxDyn(shape)).expect("length checked").into_owned();
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Rows `start..start+len` along the first axis.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() == 0 || start + len > x.shape()[0] || len == 0 {
            return Err(Error::shape("rows", format!("rows {start}..{} of {}", start + len, shape_str(x.shape()))));
        }
        let v = x.slice_axis(Axis(0), (start..start + len).into()).to_owned();
        Ok(self.push(v, Op::Rows { x: a, start }))
    }

    /// Selected columns of a rank-2 tensor.
    pub fn cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= x.shape()[1]) {
            return Err(Error::shape("cols", format!("columns {idx:?} of {}", shape_str(x.shape()))));
        }
        let v = x.select(Axis(1), idx);
        Ok(self.push(v, Op::Cols { x: a, idx: idx.to_vec() }))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let tail = &self.shape(parts[0])[1..];
        if parts.iter().any(|&p| self.shape(p).len() == 0 || &self.shape(p)[1..] != tail) {
            return Err(Error::shape("concat", "trailing extents differ"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape("concat", e.to_string()))?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// `x @ w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::shape(
                "dense",
                format!("x {} w {} b {}", shape_str(xs), shape_str(ws), shape_str(bs)),
            ));
        }
        let bias = self.value(b).view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
        let y = as2(self.value(x)).dot(&as2(self.value(w))) + &bias;
        Ok(self.push(y.into_dyn(), Op::Dense { x, w, b }))
    }

    /// Stride-1 same-padded convolution. `x: [n, c, h, w]`, `w: [o, c, k, k]`
    /// with odd `k`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 || bs[0] != ws[0] {
            return Err(Error::shape(
                "conv2d",
                format!("x {} w {} b {}", shape_str(&xs), shape_str(&ws), shape_str(&bs)),
            ));
        }
        let geom = ConvGeom { n: xs[0], c: xs[1], h: xs[2], w: xs[3], k: ws[2] };
        let out_c = ws[0];
        let xin = self.value(x).as_slice().expect("standard layout");
        let cols = Array2::from_shape_vec((geom.rows(), geom.patch()), kernels::im2col(xin, geom)).expect("im2col size");
        let wm = self.value(w).view().into_shape_with_order((out_c, geom.patch())).expect("standard layout");
        let pix = cols.dot(&wm.t());
        let pix = pix.as_standard_layout();
        let hw = geom.h * geom.w;
        let mut out = kernels::pixels_to_nchw(pix.as_slice().expect("standard"), geom.n, out_c, hw);
        let bias = self.value(b);
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let bv = bias[[i % out_c]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[geom.n, out_c, geom.h, geom.w]), out).expect("conv out size");
        Ok(self.push(y, Op::Conv2d { x, w, b, cols, geom, out_c }))
    }

    /// 2x2 stride-2 max pooling over `[n, c, h, w]` with even `h`, `w`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("need [n,c,even,even], got {}", shape_str(&xs))));
        }
        let (out, argmax) = kernels::max_pool2(self.value(x).as_slice().expect("standard"), xs[0] * xs[1], xs[2], xs[3]);
        let y = ArrayD::from_shape_vec(IxDyn(&[xs[0], xs[1], xs[2] / 2, xs[3] / 2]), out).expect("pool size");
        Ok(self.push(y, Op::MaxPool2 { x, argmax }))
    }

    /// Batch normalization over `[n, c, h, w]` (per channel) or `[n, f]`
    /// (per feature). With `running = None` batch statistics are used and
    /// returned; otherwise the supplied `(mean, var)` are applied as
    /// constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if !(xs.len() == 2 || xs.len() == 4) {
            return Err(Error::shape("batch_norm", format!("rank must be 2 or 4, got {}", shape_str(&xs))));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", "gamma/beta must have one entry per channel"));
        }
        if let Some((m, v)) = running {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batch_norm", "running statistics length"));
            }
        }
        let xin = self.value(x).as_slice().expect("standard");
        let count = T::lit((n * spatial) as f64);
        let eps = T::lit(BN_EPS);
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        mean[ch] += xin[base..base + spatial].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        var[ch] += xin[base..base + spatial].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let be = self.value(beta);
        let mut xhat = vec![T::zero(); xin.len()];
        let mut y = vec![T::zero(); xin.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for i in base..base + spatial {
                    let h = (xin[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = g[[ch]] * h + be[[ch]];
                }
            }
        }
        let xhat = ArrayD::from_shape_vec(IxDyn(&xs), xhat).expect("bn size");
        let y = ArrayD::from_shape_vec(IxDyn(&xs), y).expect("bn size");
        let batch_stats = running.is_none();
        let out = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats });
        Ok((out, batch_stats.then_some(BnStats { mean, var })))
    }

    /// Min-max rescaling of a rank-1 batch into `[0, 1]`:
    /// `(x - min) / (max - min + eps)`, all zeros when the range is below
    /// `eps`.
    pub fn minmax_normalize(&mut self, x: Var, eps: T, mode: NormGrad) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 1 || xv.is_empty() {
            return Err(Error::shape("minmax_normalize", format!("need non-empty rank 1, got {}", shape_str(xv.shape()))));
        }
        let (mut lo, mut hi) = (0usize, 0usize);
        for (i, &v) in xv.iter().enumerate() {
            if v < xv[lo] {
                lo = i;
            }
            if v > xv[hi] {
                hi = i;
            }
        }
        let range = xv[hi] - xv[lo];
        let degenerate = !(range >= eps);
        let denom = range + eps;
        let y = if degenerate {
            ArrayD::zeros(xv.raw_dim())
        } else {
            let m = xv[lo];
            xv.mapv(|v| (v - m) / denom)
        };
        Ok(self.push(y, Op::MinMax { x, lo, hi, denom, degenerate, mode }))
    }

    /// Reverse pass from a single-element `loss`. Every bound parameter gets
    /// an entry; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let mut grads: Vec<Option<ArrayD<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |v: Var, d: ArrayD<T>| match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(if d.is_standard_layout() { d } else { d.as_standard_layout().into_owned() }),
            };
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.mapv(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    acc(*a, &g / bv);
                    let mut db = g.clone();
                    Zip::from(&mut db).and(&node.value).and(bv).for_each(|d, &y, &b| *d = -*d * y / b);
                    acc(*b, db);
                }
                Op::AddConst(a) => acc(*a, g),
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.mapv(|v| v * c));
                }
                Op::Exp(a) => acc(*a, &g * &node.value),
                Op::Sqrt(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                        *d = if y > T::zero() { *d * T::lit(0.5) / y } else { T::zero() }
                    });
                    acc(*a, d);
                }
                Op::Square(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d = *d * (x + x));
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d = *d * y * (T::one() - y));
                    acc(*a, d);
                }
                Op::Asinh(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d = *d / (T::one() + x * x).sqrt());
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero()
                        }
                    });
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let gv = g[[0]];
                    acc(*a, ArrayD::from_elem(self.value(*a).raw_dim(), gv));
                }
                Op::Mean(a) => {
                    let xv = self.value(*a);
                    let gv = g[[0]] / T::lit(xv.len() as f64);
                    acc(*a, ArrayD::from_elem(xv.raw_dim(), gv));
                }
                Op::MeanRows(a) => {
                    let xv = self.value(*a);
                    let n = xv.shape()[0];
                    let m = xv.len() / n;
                    let inv = T::one() / T::lit(m as f64);
                    let mut d = ArrayD::zeros(xv.raw_dim());
                    for (mut row, &gv) in d.axis_iter_mut(Axis(0)).zip(g.iter()) {
                        row.fill(gv * inv);
                    }
                    acc(*a, d);
                }
                Op::PowMean { x, p, mean_pow } => {
                    let xv = self.value(*x);
                    let (p, s) = (*p, *mean_pow);
                    let d = if s > T::zero() {
                        let coef = g[[0]] * s.powf(T::one() / p - T::one()) / T::lit(xv.len() as f64);
                        xv.mapv(|v| coef * v.powf(p - T::one()))
                    } else {
                        ArrayD::zeros(xv.raw_dim())
                    };
                    acc(*x, d);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).raw_dim();
                    acc(*a, g.into_shape_with_order(shape).expect("same length"));
                }
                Op::Rows { x, start } => {
                    let xv = self.value(*x);
                    let mut d = ArrayD::zeros(xv.raw_dim());
                    let len = g.shape()[0];
                    d.slice_axis_mut(Axis(0), (*start..*start + len).into()).assign(&g);
                    acc(*x, d);
                }
                Op::Cols { x, idx } => {
                    let xv = self.value(*x);
                    let mut d = Array2::<T>::zeros((xv.shape()[0], xv.shape()[1]));
                    let g2 = as2(&g);
                    for (j, &col) in idx.iter().enumerate() {
                        let mut dc = d.column_mut(col);
                        dc += &g2.column(j);
                    }
                    acc(*x, d.into_dyn());
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.shape(p)[0];
                        acc(p, g.slice_axis(Axis(0), (start..start + len).into()).to_owned());
                        start += len;
                    }
                }
                Op::Dense { x, w, b } => {
                    let g2 = as2(&g);
                    acc(*x, g2.dot(&as2(self.value(*w)).t()).into_dyn());
                    acc(*w, as2(self.value(*x)).t().dot(&g2).into_dyn());
                    acc(*b, g2.sum_axis(Axis(0)).into_dyn());
                }
                Op::Conv2d { x, w, b, cols, geom, out_c } => {
                    let hw = geom.h * geom.w;
                    let gs = g.as_standard_layout();
                    let gpix = kernels::nchw_to_pixels(gs.as_slice().expect("standard"), geom.n, *out_c, hw);
                    let gpix = Array2::from_shape_vec((geom.rows(), *out_c), gpix).expect("size");
                    let wm = self.value(*w).view().into_shape_with_order((*out_c, geom.patch())).expect("standard");
                    let dw = gpix.t().dot(cols);
                    acc(*w, dw.into_shape_with_order(IxDyn(self.shape(*w))).expect("size"));
                    acc(*b, gpix.sum_axis(Axis(0)).into_dyn());
                    let dcols = gpix.dot(&wm);
                    let dcols = dcols.as_standard_layout();
                    let dx = kernels::col2im(dcols.as_slice().expect("standard"), *geom);
                    acc(*x, ArrayD::from_shape_vec(IxDyn(&[geom.n, geom.c, geom.h, geom.w]), dx).expect("size"));
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = self.value(*x);
                    let mut d = vec![T::zero(); xv.len()];
                    for (&src, &gv) in argmax.iter().zip(g.iter()) {
                        d[src] += gv;
                    }
                    acc(*x, ArrayD::from_shape_vec(xv.raw_dim(), d).expect("size"));
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let shape = xhat.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let spatial: usize = shape[2..].iter().product();
                    let gs = g.as_standard_layout();
                    let gsl = gs.as_slice().expect("standard");
                    let xh = xhat.as_slice().expect("standard");
                    let gam = self.value(*gamma);
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * spatial;
                            for i in base..base + spatial {
                                dgamma[ch] += gsl[i] * xh[i];
                                dbeta[ch] += gsl[i];
                            }
                        }
                    }
                    let mut dx = vec![T::zero(); gsl.len()];
                    let m = T::lit((n * spatial) as f64);
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * spatial;
                            let k = gam[[ch]] * inv_std[ch];
                            for i in base..base + spatial {
                                dx[i] = if *batch_stats {
                                    // dxhat sums reduce to gamma * dbeta and gamma * dgamma.
                                    k * (gsl[i] - dbeta[ch] / m - xh[i] * dgamma[ch] / m)
                                } else {
                                    k * gsl[i]
                                };
                            }
                        }
                    }
                    acc(*x, ArrayD::from_shape_vec(IxDyn(shape), dx).expect("size"));
                    acc(*gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).expect("size"));
                    acc(*beta, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).expect("size"));
                }
                Op::MinMax { x, lo, hi, denom, degenerate, mode } => {
                    let xv = self.value(*x);
                    if *degenerate {
                        acc(*x, ArrayD::zeros(xv.raw_dim()));
                    } else {
                        let denom = *denom;
                        let mut d = g.mapv(|v| v / denom);
                        if *mode == NormGrad::Full {
                            let total: T = g.iter().copied().sum();
                            let weighted: T = g.iter().zip(node.value.iter()).map(|(&a, &b)| a * b).sum();
                            d[[*lo]] += (weighted - total) / denom;
                            d[[*hi]] -= weighted / denom;
                        }
                        acc(*x, d);
                    }
                }
            }
        }

        let mut out: Gradients<T> = IndexMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0].take().unwrap_or_else(|| ArrayD::zeros(self.value(*v).raw_dim()));
            match out.get_mut(name) {
                Some(existing) => *existing += &g,
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}

/// Builds the graph described by `f` and returns its output value, failing on
/// any non-finite intermediate.
pub fn forward<T, F>(params: &ParameterSet<T>, f: F) -> Result<ArrayD<T>>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = f(&mut tape, &bound)?;
    tape.check_finite()?;
    Ok(tape.value(out).clone())
}

/// Scalar value and gradients of the loss described by `f`.
pub fn value_and_grad<T, F>(params: &ParameterSet<T>, f: F) -> Result<(T, Gradients<T>)>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = f(&mut tape, &bound)?;
    tape.check_finite()?;
    let grads = tape.backward(out)?;
    Ok((tape.scalar(out), grads))
}
