//! Normalising kernels: softmax family, adaptive pooling, layer norm.

use crate::ops::shape::split_at_axis;
use crate::tensor::{Scalar, Tensor};

pub(crate) fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, inner) = split_at_axis(x.shape(), axis);
    let len = x.shape()[axis];
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..len).map(|k| (xd[at(k)] - m).exp()).sum();
            if log {
                let lz = z.ln() + m;
                (0..len).for_each(|k| od[at(k)] = xd[at(k)] - lz);
            } else {
                (0..len).for_each(|k| od[at(k)] = (xd[at(k)] - m).exp() / z);
            }
        }
    }
    out
}

/// Backward of softmax (`log == false`) or log-softmax, given the forward output.
pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, inner) = split_at_axis(y.shape(), axis);
    let len = y.shape()[axis];
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), g.data());
    let dd = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            if log {
                let gs: T = (0..len).map(|k| gd[at(k)]).sum();
                (0..len).for_each(|k| dd[at(k)] = gd[at(k)] - yd[at(k)].exp() * gs);
            } else {
                let dot: T = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                (0..len).for_each(|k| dd[at(k)] = yd[at(k)] * (gd[at(k)] - dot));
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Global pooling to `N x C x 1 x 1`; for max, also the winning flat offset
/// within each plane (first occurrence in row-major order).
pub(crate) fn adaptive_pool<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape()[..] else { unreachable!("checked by caller") };
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c, 1, 1]);
    let mut argmax = Vec::new();
    for nc in 0..n * c {
        let plane = &x.data()[nc * hw..][..hw];
        out.data_mut()[nc] = match mode {
            PoolMode::Avg => plane.iter().copied().sum::<T>() / T::from_f64_lossy(hw as f64),
            PoolMode::Max => {
                let mut best = 0;
                for (i, v) in plane.iter().enumerate() {
                    if *v > plane[best] {
                        best = i;
                    }
                }
                argmax.push(best);
                plane[best]
            }
        };
    }
    (out, argmax)
}

pub(crate) fn adaptive_pool_backward<T: Scalar>(
    in_shape: &[usize],
    g: &Tensor<T>,
    mode: PoolMode,
    argmax: &[usize],
) -> Tensor<T> {
    let [n, c, h, w] = in_shape[..] else { unreachable!("checked by caller") };
    let hw = h * w;
    let mut dx = Tensor::zeros(in_shape);
    let inv = T::one() / T::from_f64_lossy(hw as f64);
    for nc in 0..n * c {
        let gv = g.data()[nc];
        let plane = &mut dx.data_mut()[nc * hw..][..hw];
        match mode {
            PoolMode::Avg => plane.iter_mut().for_each(|v| *v = gv * inv),
            PoolMode::Max => plane[argmax[nc]] = gv,
        }
    }
    dx
}

/// Layer norm over the last axis. Returns the output plus the per-row
/// normalised values and inverse standard deviations for the backward pass.
pub(crate) fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let d = *x.shape().last().expect("rank >= 1");
    let rows = x.numel() / d;
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = T::one() / T::from_f64_lossy(d as f64);
    let eps = T::from_f64_lossy(eps);
    for r in 0..rows {
        let row = &x.data()[r * d..][..d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for k in 0..d {
            let xh = (row[k] - mean) * rs;
            xhat.data_mut()[r * d + k] = xh;
            out.data_mut()[r * d + k] = xh * gamma.data()[k] + beta.data()[k];
        }
    }
    (out, xhat, rstd)
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    rstd: &[T],
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = *xhat.shape().last().expect("rank >= 1");
    let rows = xhat.numel() / d;
    let mut dx = Tensor::zeros(xhat.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let inv_d = T::one() / T::from_f64_lossy(d as f64);
    for r in 0..rows {
        let xh = &xhat.data()[r * d..][..d];
        let gr = &g.data()[r * d..][..d];
        let mut sum_gx = T::zero();
        let mut sum_gxh = T::zero();
        for k in 0..d {
            let gx = gr[k] * gamma.data()[k];
            sum_gx = sum_gx + gx;
            sum_gxh = sum_gxh + gx * xh[k];
            dgamma.data_mut()[k] = dgamma.data()[k] + gr[k] * xh[k];
            dbeta.data_mut()[k] = dbeta.data()[k] + gr[k];
        }
        for k in 0..d {
            let gx = gr[k] * gamma.data()[k];
            dx.data_mut()[r * d + k] = rstd[r] * (gx - inv_d * sum_gx - xh[k] * inv_d * sum_gxh);
        }
    }
    (dx, dgamma, dbeta)
}
