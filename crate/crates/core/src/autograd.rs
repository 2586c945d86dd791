//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Every operation appends one node holding its output value, its inputs and
//! whatever it saved for the backward pass. Node order is creation order, so
//! the tape is already topologically sorted and [`Tape::backward`] simply
//! walks it in reverse.

use crate::error::{dim_err, Error, Result};
use crate::linalg::gemm;
use crate::ops::conv::{self, ConvSpec};
use crate::ops::reduce::{self, PoolMode};
use crate::ops::sample;
use crate::ops::shape;
use crate::ops::spectral::{self, SpectralMode};
use crate::tensor::{
    broadcast_shape, broadcast_strides, expand_to_shape, for_each_offset2, reduce_to_shape, Scalar, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize, log: bool },
    SumAll(Var),
    SumAxes(Var),
    MeanAxes { x: Var, count: usize },
    StdAxes { x: Var, mean: Tensor<T>, count: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvTranspose { x: Var, w: Var, b: Option<Var> },
    Pool { x: Var, mode: PoolMode, argmax: Vec<usize> },
    Dft2 { x: Var, mode: SpectralMode },
    Unfold3x3(Var),
    GridSample { x: Var, flow: Var },
    Resize(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation graph plus accumulated leaf gradients.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(v: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
}

fn gelu_grad<T: Scalar>(v: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (v + a * v * v * v)).tanh();
    half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v)
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Sigmoid(..) => "sigmoid",
        Op::Gelu(..) => "gelu",
        Op::Abs(..) => "abs",
        Op::Softmax { .. } => "softmax",
        Op::SumAll(..) => "sum",
        Op::SumAxes(..) => "sum_axes",
        Op::MeanAxes { .. } => "mean_axes",
        Op::StdAxes { .. } => "std_axes",
        Op::Reshape(..) => "reshape",
        Op::Permute { .. } => "permute",
        Op::Concat { .. } => "concat",
        Op::Narrow { .. } => "narrow",
        Op::Bmm { .. } => "bmm",
        Op::Linear { .. } => "linear",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose { .. } => "conv_transpose",
        Op::Pool { .. } => "adaptive_pool",
        Op::Dft2 { .. } => "dft2",
        Op::Unfold3x3(..) => "unfold3x3",
        Op::GridSample { .. } => "grid_sample",
        Op::Resize(..) => "resize_bilinear",
        Op::LayerNorm { .. } => "layer_norm",
    }
}

fn check_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    for &a in axes {
        if a >= shape.len() {
            return Err(dim_err!("axis {} out of range for shape {:?}", a, shape));
        }
    }
    Ok(())
}

fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), check_finite: false }
    }

    /// Panics as soon as any operation produces NaN or infinity.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if self.check_finite {
            assert!(value.all_finite(), "non-finite value produced by {:?}", op_name(&op));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- element-wise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape(), data);
        }
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let sa = broadcast_strides(ta.shape(), &out_shape);
        let sb = broadcast_strides(tb.shape(), &out_shape);
        let (da, db) = (ta.data(), tb.data());
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for_each_offset2(&out_shape, &sa, &sb, |_, oa, ob| data.push(f(da[oa], db[ob])));
        Tensor::new(&out_shape, data)
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Broadcasting element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let v = self.value(x).map(|e| e + s);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.abs());
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axes(self.shape(x), &[axis])?;
        let v = reduce::softmax(self.value(x), axis, false);
        Ok(self.push(v, Op::Softmax { x, axis, log: false }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axes(self.shape(x), &[axis])?;
        let v = reduce::softmax(self.value(x), axis, true);
        Ok(self.push(v, Op::Softmax { x, axis, log: true }, &[x]))
    }

    // ---- reductions ------------------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x), &[x])
    }

    /// Sum over `axes`, keeping them with extent 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        check_axes(self.shape(x), axes)?;
        let v = reduce_to_shape(self.value(x), &keepdim_shape(self.shape(x), axes));
        Ok(self.push(v, Op::SumAxes(x), &[x]))
    }

    /// Mean over `axes`, keeping them with extent 1.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        check_axes(self.shape(x), axes)?;
        let kept = keepdim_shape(self.shape(x), axes);
        let count = self.value(x).numel() / kept.iter().product::<usize>().max(1);
        let inv = T::one() / T::from_f64_lossy(count as f64);
        let v = reduce_to_shape(self.value(x), &kept).map(|e| e * inv);
        Ok(self.push(v, Op::MeanAxes { x, count }, &[x]))
    }

    /// Population (divide-by-n) standard deviation over `axes`, kept with extent 1.
    pub fn std_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        check_axes(self.shape(x), axes)?;
        let xv = self.value(x);
        let kept = keepdim_shape(xv.shape(), axes);
        let count = xv.numel() / kept.iter().product::<usize>().max(1);
        let inv = T::one() / T::from_f64_lossy(count as f64);
        let mean = reduce_to_shape(xv, &kept).map(|e| e * inv);
        let centered = {
            let m = expand_to_shape(&mean, xv.shape());
            let data = xv.data().iter().zip(m.data()).map(|(&a, &b)| (a - b) * (a - b)).collect();
            Tensor::new(xv.shape(), data)?
        };
        let v = reduce_to_shape(&centered, &kept).map(|e| (e * inv).sqrt());
        Ok(self.push(v, Op::StdAxes { x, mean, count }, &[x]))
    }

    // ---- structure -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(new_shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("invalid permutation {:?} for shape {:?}", perm, self.shape(x)));
        }
        let v = shape::permute(self.value(x), perm);
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        check_axes(&s0, &[axis])?;
        for v in xs {
            let s = self.shape(*v);
            let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(dim_err!("concat along {}: {:?} vs {:?}", axis, s0, s));
            }
        }
        let vals: Vec<&Tensor<T>> = xs.iter().map(|v| self.value(*v)).collect();
        let out = shape::concat(&vals, axis);
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        check_axes(self.shape(x), &[axis])?;
        if start + len > self.shape(x)[axis] {
            return Err(dim_err!(
                "narrow [{}, {}) out of range on axis {} of {:?}",
                start,
                start + len,
                axis,
                self.shape(x)
            ));
        }
        let v = shape::narrow(self.value(x), axis, start, len);
        Ok(self.push(v, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Splits `axis` into `parts` equal slices.
    pub fn split(&mut self, x: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        check_axes(self.shape(x), &[axis])?;
        let extent = self.shape(x)[axis];
        if parts == 0 || extent % parts != 0 {
            return Err(dim_err!("cannot split axis {} of {:?} into {} equal parts", axis, self.shape(x), parts));
        }
        let len = extent / parts;
        (0..parts).map(|p| self.narrow(x, axis, p * len, len)).collect()
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product of `B x M x K` and `B x K x N` operands, either
    /// optionally stored transposed.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ba, ra, ca], &[bb, rb, cb]) = (&sa[..], &sb[..]) else {
            return Err(dim_err!("bmm expects rank-3 operands, got {:?} and {:?}", sa, sb));
        };
        let (m, k1) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if ba != bb || k1 != k2 {
            return Err(dim_err!("bmm shape mismatch: {:?} x {:?}", sa, sb));
        }
        let mut out = Tensor::zeros(&[ba, m, n]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            gemm(ta, tb, m, n, k1, &da[i * m * k1..], &db[i * k1 * n..], T::zero(), &mut out.data_mut()[i * m * n..]);
        }
        Ok(self.push(out, Op::Bmm { a, b, ta, tb }, &[a, b]))
    }

    /// Affine map over the last axis: `x . w^T + b`, `w` is `O x I`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [o, i] = ws[..] else {
            return Err(dim_err!("linear weight must be O x I, got {:?}", ws));
        };
        if xs.last() != Some(&i) {
            return Err(dim_err!("linear input {:?} does not match weight {:?}", xs, ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(dim_err!("linear bias {:?} does not match weight {:?}", self.shape(b), ws));
            }
        }
        let rows = self.value(x).numel() / i;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = o;
        let mut out = Tensor::zeros(&out_shape);
        gemm(false, true, rows, o, i, self.value(x).data(), self.value(w).data(), T::zero(), out.data_mut());
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            for r in 0..rows {
                for (v, bv) in out.data_mut()[r * o..][..o].iter_mut().zip(&bd) {
                    *v = *v + *bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    // ---- convolution -------------------------------------------------------

    pub fn conv2d_spec(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geo = conv::conv_geom(self.shape(x), self.shape(w), b.map(|b| self.shape(b)), spec)?;
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geo);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    /// 2-D convolution, `x` NCHW, `w` OIHW with `I = C / groups`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Var> {
        self.conv2d_spec(x, w, b, ConvSpec::new(stride, padding, dilation, groups))
    }

    /// 1-D convolution over `N x C x L` with an `O x I x k` kernel.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, c, l], &[o, i, k]) = (&xs[..], &ws[..]) else {
            return Err(dim_err!("conv1d expects N x C x L input and O x I x k weight, got {:?} and {:?}", xs, ws));
        };
        let x4 = self.reshape(x, &[n, c, 1, l])?;
        let w4 = self.reshape(w, &[o, i, 1, k])?;
        let spec = ConvSpec { padding: (0, padding), ..ConvSpec::new(1, 0, 1, 1) };
        let y = self.conv2d_spec(x4, w4, b, spec)?;
        let lo = self.shape(y)[3];
        self.reshape(y, &[n, o, lo])
    }

    /// Transposed convolution with kernel = stride = `k` (exact `k`-fold
    /// upsampling); `w` is `C x O x k x k`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = conv::conv_transpose_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvTranspose { x, w, b }, &inputs))
    }

    /// Global pooling to `N x C x 1 x 1`.
    pub fn adaptive_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(dim_err!("adaptive pooling over an empty plane {:?}", self.shape(x)));
        }
        let (v, argmax) = reduce::adaptive_pool(self.value(x), mode);
        Ok(self.push(v, Op::Pool { x, mode, argmax }, &[x]))
    }

    /// Fourier transform of an `N x L x C` tensor along C then L, reduced by `mode`.
    pub fn dft2(&mut self, x: Var, mode: SpectralMode) -> Result<Var> {
        if self.shape(x).len() != 3 {
            return Err(dim_err!("dft2 expects N x L x C, got {:?}", self.shape(x)));
        }
        let v = spectral::dft2_forward(self.value(x), mode);
        Ok(self.push(v, Op::Dft2 { x, mode }, &[x]))
    }

    /// Real part of the two-axis DFT.
    pub fn dft_real_2axes(&mut self, x: Var) -> Result<Var> {
        self.dft2(x, SpectralMode::Real)
    }

    /// 3x3 neighbourhood gather, `N x C x H x W -> N x 9C x HW`.
    pub fn unfold3x3(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims4()?;
        let v = shape::unfold3x3(self.value(x));
        Ok(self.push(v, Op::Unfold3x3(x), &[x]))
    }

    /// Bilinear warp of `x` by a per-pixel `N x 2 x H x W` displacement.
    pub fn grid_sample(&mut self, x: Var, flow: Var) -> Result<Var> {
        let (n, _, h, w) = self.value(x).dims4()?;
        if self.shape(flow) != [n, 2, h, w] {
            return Err(dim_err!(
                "flow {:?} does not match input {:?} (need N x 2 x H x W)",
                self.shape(flow),
                self.shape(x)
            ));
        }
        let v = sample::grid_sample_forward(self.value(x), self.value(flow));
        Ok(self.push(v, Op::GridSample { x, flow }, &[x, flow]))
    }

    /// Bilinear resize (half-pixel centres, edge clamped).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 || oh == 0 || ow == 0 {
            return Err(dim_err!("cannot resize {:?} to {}x{}", self.shape(x), oh, ow));
        }
        let v = sample::resize_forward(self.value(x), oh, ow);
        Ok(self.push(v, Op::Resize(x), &[x]))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| dim_err!("layer_norm of a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!("layer_norm affine params must be [{}]", d));
        }
        let (v, xhat, rstd) = reduce::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a single-element `loss`. Leaf gradients add onto
    /// whatever earlier calls accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (var, contrib) in self.node_backward(i, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.rg(*a) {
                    res.push((*a, reduce_to_shape(g, self.shape(*a))));
                }
                if self.rg(*b) {
                    let gb = reduce_to_shape(g, self.shape(*b));
                    res.push((*b, if neg { gb.map(|v| -v) } else { gb }));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let full = out.shape();
                if self.rg(*a) {
                    let eb = expand_to_shape(vb, full);
                    let prod =
                        Tensor::new(full, g.data().iter().zip(eb.data()).map(|(&x, &y)| x * y).collect()).unwrap();
                    res.push((*a, reduce_to_shape(&prod, va.shape())));
                }
                if self.rg(*b) {
                    let ea = expand_to_shape(va, full);
                    let prod =
                        Tensor::new(full, g.data().iter().zip(ea.data()).map(|(&x, &y)| x * y).collect()).unwrap();
                    res.push((*b, reduce_to_shape(&prod, vb.shape())));
                }
            }
            Op::Scale(x, s) => res.push((*x, g.map(|v| v * *s))),
            Op::AddScalar(x) => res.push((*x, g.clone())),
            Op::Sigmoid(x) => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y * (T::one() - y)).collect();
                res.push((*x, Tensor::new(out.shape(), d).unwrap()));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = g.data().iter().zip(xv.data()).map(|(&gv, &v)| gv * gelu_grad(v)).collect();
                res.push((*x, Tensor::new(out.shape(), d).unwrap()));
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                res.push((*x, Tensor::new(out.shape(), d).unwrap()));
            }
            Op::Softmax { x, axis, log } => {
                res.push((*x, reduce::softmax_backward(out, g, *axis, *log)));
            }
            Op::SumAll(x) => res.push((*x, Tensor::full(self.shape(*x), g.data()[0]))),
            Op::SumAxes(x) => res.push((*x, expand_to_shape(g, self.shape(*x)))),
            Op::MeanAxes { x, count } => {
                let inv = T::one() / T::from_f64_lossy(*count as f64);
                res.push((*x, expand_to_shape(g, self.shape(*x)).map(|v| v * inv)));
            }
            Op::StdAxes { x, mean, count } => {
                let xv = self.value(*x);
                let full = xv.shape();
                let (eg, es, em) = (expand_to_shape(g, full), expand_to_shape(out, full), expand_to_shape(mean, full));
                let n = T::from_f64_lossy(*count as f64);
                let d = (0..xv.numel())
                    .map(|k| {
                        let s = es.data()[k];
                        if s > T::zero() {
                            eg.data()[k] * (xv.data()[k] - em.data()[k]) / (n * s)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                res.push((*x, Tensor::new(full, d).unwrap()));
            }
            Op::Reshape(x) => res.push((*x, g.clone().reshape(self.shape(*x)).unwrap())),
            Op::Permute { x, perm } => res.push((*x, shape::permute(g, &shape::inverse_perm(perm)))),
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for v in xs {
                    let len = self.shape(*v)[*axis];
                    if self.rg(*v) {
                        res.push((*v, shape::narrow(g, *axis, start, len)));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                res.push((*x, shape::narrow_backward(g, self.shape(*x), *axis, *start)));
            }
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let batch = sa[0];
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(sa);
                    for bi in 0..batch {
                        let gs = &g.data()[bi * m * n..];
                        let bs = &db[bi * k * n..];
                        let dst = &mut ga.data_mut()[bi * m * k..];
                        if *ta {
                            // dA (k x m) = op(B) . dC^T
                            gemm(*tb, true, k, m, n, bs, gs, T::zero(), dst);
                        } else {
                            // dA (m x k) = dC . op(B)^T
                            gemm(false, !*tb, m, k, n, gs, bs, T::zero(), dst);
                        }
                    }
                    res.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(sb);
                    for bi in 0..batch {
                        let gs = &g.data()[bi * m * n..];
                        let as_ = &da[bi * m * k..];
                        let dst = &mut gb.data_mut()[bi * k * n..];
                        if *tb {
                            // dB (n x k) = dC^T . op(A)
                            gemm(true, *ta, n, k, m, gs, as_, T::zero(), dst);
                        } else {
                            // dB (k x n) = op(A)^T . dC
                            gemm(!*ta, false, k, n, m, as_, gs, T::zero(), dst);
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [o, i] = wv.shape()[..] else { unreachable!() };
                let rows = xv.numel() / i;
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(xv.shape());
                    gemm(false, false, rows, i, o, g.data(), wv.data(), T::zero(), gx.data_mut());
                    res.push((*x, gx));
                }
                if self.rg(*w) {
                    let mut gw = Tensor::zeros(wv.shape());
                    gemm(true, false, o, i, rows, g.data(), xv.data(), T::zero(), gw.data_mut());
                    res.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut gb = Tensor::zeros(&[o]);
                    for r in 0..rows {
                        for (acc, v) in gb.data_mut().iter_mut().zip(&g.data()[r * o..][..o]) {
                            *acc = *acc + *v;
                        }
                    }
                    res.push((b, gb));
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let geo = conv::conv_geom(self.shape(*x), self.shape(*w), None, *spec).unwrap();
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let (gx, gw, gb) = conv::conv2d_backward(self.value(*x), self.value(*w), g, &geo, need);
                res.extend(gx.map(|t| (*x, t)));
                res.extend(gw.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, gb) {
                    res.push((*b, t));
                }
            }
            Op::ConvTranspose { x, w, b } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let (gx, gw, gb) = conv::conv_transpose_backward(self.value(*x), self.value(*w), g, need);
                res.extend(gx.map(|t| (*x, t)));
                res.extend(gw.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, gb) {
                    res.push((*b, t));
                }
            }
            Op::Pool { x, mode, argmax } => {
                res.push((*x, reduce::adaptive_pool_backward(self.shape(*x), g, *mode, argmax)));
            }
            Op::Dft2 { x, mode } => res.push((*x, spectral::dft2_backward(self.value(*x), g, *mode))),
            Op::Unfold3x3(x) => res.push((*x, shape::fold3x3(g, self.shape(*x)))),
            Op::GridSample { x, flow } => {
                let need = (self.rg(*x), self.rg(*flow));
                let (gx, gf) = sample::grid_sample_backward(self.value(*x), self.value(*flow), g, need);
                res.extend(gx.map(|t| (*x, t)));
                res.extend(gf.map(|t| (*flow, t)));
            }
            Op::Resize(x) => res.push((*x, sample::resize_backward(self.shape(*x), g))),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (gx, gg, gbeta) = reduce::layer_norm_backward(xhat, rstd, self.value(*gamma), g);
                res.push((*x, gx));
                res.push((*gamma, gg));
                res.push((*beta, gbeta));
            }
        }
        res
    }
}
