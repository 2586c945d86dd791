//! Loop-based reference implementations shared by the integration tests.
//! Plain `Vec<f64>` in, `Vec<f64>` out; no tape involved.
#![allow(dead_code)]

use faewnet::nn::LayerParams;
use faewnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Overwrites every parameter with uniform noise in `[-s, s]`.
pub fn randomize(params: &mut LayerParams<f64>, s: f64, rng: &mut impl Rng) {
    for (_, p) in params.iter_mut() {
        p.value = Tensor::from_fn(p.value.shape(), |_| rng.gen_range(-s..s));
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dense NCHW conv, OIHW weight, zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    b: &[f64],
    (o, k): (usize, usize),
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let wo = (w + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let (ci, og) = (c / groups, o / groups);
    let mut out = vec![0.0; n * o * ho * wo];
    for s in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oc];
                    for ic in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((s * c + g * ci + ic) * h + iy as usize) * w + ix as usize];
                                acc += xv * wt[((oc * ci + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((s * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

/// `y = W x + b` for one vector, `W` is `out x in`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let o = b.len();
    let i = x.len();
    (0..o).map(|r| b[r] + (0..i).map(|j| w[r * i + j] * x[j]).sum::<f64>()).collect()
}

/// Complex 2-D DFT of an `L x C` slice, `exp(-2 pi i (kp/L + mq/C))`.
pub fn dft2(x: &[f64], l: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; l * c];
    let mut im = vec![0.0; l * c];
    for k in 0..l {
        for m in 0..c {
            for p in 0..l {
                for q in 0..c {
                    let th = 2.0
                        * std::f64::consts::PI
                        * (((k * p) % l) as f64 / l as f64 + ((m * q) % c) as f64 / c as f64);
                    re[k * c + m] += x[p * c + q] * th.cos();
                    im[k * c + m] -= x[p * c + q] * th.sin();
                }
            }
        }
    }
    (re, im)
}

/// Bilinear sample with border clamp at `(sx, sy)` of an `h x w` plane.
pub fn bilinear(plane: &[f64], h: usize, w: usize, sx: f64, sy: f64) -> f64 {
    let cx = sx.clamp(0.0, (w - 1) as f64);
    let cy = sy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (cx - x0 as f64, cy - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
    let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
