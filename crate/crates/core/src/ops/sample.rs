//! Bilinear resampling: flow-driven warping with border clamping, and
//! half-pixel-centred resizing.

use crate::tensor::{Scalar, Tensor};

/// Bilinear footprint of one sample point after border clamping.
#[derive(Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: T,
    wy: T,
    /// Whether the coordinate was strictly inside the clamp range; the
    /// derivative w.r.t. the coordinate is zero otherwise.
    free_x: bool,
    free_y: bool,
}

#[inline]
fn tap<T: Scalar>(sx: T, sy: T, h: usize, w: usize) -> Tap<T> {
    let max_x = T::from_f64_lossy((w - 1) as f64);
    let max_y = T::from_f64_lossy((h - 1) as f64);
    let free_x = sx > T::zero() && sx < max_x;
    let free_y = sy > T::zero() && sy < max_y;
    let cx = sx.max(T::zero()).min(max_x);
    let cy = sy.max(T::zero()).min(max_y);
    let fx = cx.floor();
    let fy = cy.floor();
    let x0 = fx.to_usize().unwrap_or(0).min(w - 1);
    let y0 = fy.to_usize().unwrap_or(0).min(h - 1);
    Tap { x0, x1: (x0 + 1).min(w - 1), y0, y1: (y0 + 1).min(h - 1), wx: cx - fx, wy: cy - fy, free_x, free_y }
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

/// `out(y, x) = input(y + dy, x + dx)` sampled bilinearly, coordinates clamped
/// to the image border. `flow` is `N x 2 x H x W` with channel 0 = dx.
pub(crate) fn grid_sample_forward<T: Scalar>(x: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape()[..] else { unreachable!("checked by caller") };
    let mut out = Tensor::zeros(x.shape());
    let plane = h * w;
    for s in 0..n {
        let fl = &flow.data()[s * 2 * plane..][..2 * plane];
        for yy in 0..h {
            for xx in 0..w {
                let p = yy * w + xx;
                let sx = T::from_f64_lossy(xx as f64) + fl[p];
                let sy = T::from_f64_lossy(yy as f64) + fl[plane + p];
                let t = tap(sx, sy, h, w);
                for ch in 0..c {
                    let src = &x.data()[(s * c + ch) * plane..][..plane];
                    // Nested lerps keep zero-flow and constant images exact.
                    let top = lerp(src[t.y0 * w + t.x0], src[t.y0 * w + t.x1], t.wx);
                    let bot = lerp(src[t.y1 * w + t.x0], src[t.y1 * w + t.x1], t.wx);
                    out.data_mut()[(s * c + ch) * plane + p] = lerp(top, bot, t.wy);
                }
            }
        }
    }
    out
}

pub(crate) fn grid_sample_backward<T: Scalar>(
    x: &Tensor<T>,
    flow: &Tensor<T>,
    gy: &Tensor<T>,
    need: (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, c, h, w] = x.shape()[..] else { unreachable!("checked by caller") };
    let plane = h * w;
    let mut dx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut dflow = need.1.then(|| Tensor::zeros(flow.shape()));
    let one = T::one();
    for s in 0..n {
        let fl = &flow.data()[s * 2 * plane..][..2 * plane];
        for yy in 0..h {
            for xx in 0..w {
                let p = yy * w + xx;
                let sx = T::from_f64_lossy(xx as f64) + fl[p];
                let sy = T::from_f64_lossy(yy as f64) + fl[plane + p];
                let t = tap(sx, sy, h, w);
                let (i00, i01) = (t.y0 * w + t.x0, t.y0 * w + t.x1);
                let (i10, i11) = (t.y1 * w + t.x0, t.y1 * w + t.x1);
                let mut gdx = T::zero();
                let mut gdy = T::zero();
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    let g = gy.data()[base + p];
                    if let Some(dx) = dx.as_mut() {
                        let d = dx.data_mut();
                        d[base + i00] = d[base + i00] + g * (one - t.wx) * (one - t.wy);
                        d[base + i01] = d[base + i01] + g * t.wx * (one - t.wy);
                        d[base + i10] = d[base + i10] + g * (one - t.wx) * t.wy;
                        d[base + i11] = d[base + i11] + g * t.wx * t.wy;
                    }
                    if dflow.is_some() {
                        let src = &x.data()[base..][..plane];
                        let (v00, v01, v10, v11) = (src[i00], src[i01], src[i10], src[i11]);
                        if t.free_x {
                            gdx = gdx + g * ((one - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
                        }
                        if t.free_y {
                            gdy = gdy + g * ((one - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
                        }
                    }
                }
                if let Some(df) = dflow.as_mut() {
                    let d = df.data_mut();
                    d[s * 2 * plane + p] = d[s * 2 * plane + p] + gdx;
                    d[s * 2 * plane + plane + p] = d[s * 2 * plane + plane + p] + gdy;
                }
            }
        }
    }
    (dx, dflow)
}

/// Per-axis source taps for a half-pixel-centred bilinear resize.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape()[..] else { unreachable!("checked by caller") };
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..][..h * w];
        let dst = &mut out.data_mut()[nc * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::from_f64_lossy(wy);
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::from_f64_lossy(wx);
                let top = lerp(src[y0 * w + x0], src[y0 * w + x1], wx);
                let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], wx);
                dst[oy * ow + ox] = lerp(top, bot, wy);
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Scalar>(in_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = in_shape[..] else { unreachable!("checked by caller") };
    let [_, _, oh, ow] = gy.shape()[..] else { unreachable!() };
    if (h, w) == (oh, ow) {
        return gy.clone();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let one = T::one();
    let mut dx = Tensor::zeros(in_shape);
    for nc in 0..n * c {
        let g = &gy.data()[nc * oh * ow..][..oh * ow];
        let d = &mut dx.data_mut()[nc * h * w..][..h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::from_f64_lossy(wy);
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::from_f64_lossy(wx);
                let gv = g[oy * ow + ox];
                d[y0 * w + x0] = d[y0 * w + x0] + gv * (one - wx) * (one - wy);
                d[y0 * w + x1] = d[y0 * w + x1] + gv * wx * (one - wy);
                d[y1 * w + x0] = d[y1 * w + x0] + gv * (one - wx) * wy;
                d[y1 * w + x1] = d[y1 * w + x1] + gv * wx * wy;
            }
        }
    }
    dx
}
