//! Two-axis discrete Fourier transform over token tensors (`N x L x C`):
//! first along the hidden axis, then along the sequence axis.
//!
//! The transform is evaluated as dense cosine/sine matrix products. For the
//! sequence lengths used here (at most a few hundred) this is cheap and
//! keeps the backward pass an explicit transpose.

use std::f64::consts::PI;

use crate::linalg::gemm;
use crate::tensor::{Scalar, Tensor};

/// Which reduction of the complex spectrum is kept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SpectralMode {
    #[default]
    Real,
    Imag,
    Amplitude,
    /// Branch disabled; the op yields zeros.
    Off,
}

impl SpectralMode {
    pub const ALL: [SpectralMode; 4] =
        [SpectralMode::Real, SpectralMode::Imag, SpectralMode::Amplitude, SpectralMode::Off];

    pub fn name(self) -> &'static str {
        match self {
            SpectralMode::Real => "real",
            SpectralMode::Imag => "imag",
            SpectralMode::Amplitude => "amplitude",
            SpectralMode::Off => "off",
        }
    }
}

impl std::str::FromStr for SpectralMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "real" => Ok(SpectralMode::Real),
            "imag" => Ok(SpectralMode::Imag),
            "amplitude" => Ok(SpectralMode::Amplitude),
            "off" => Ok(SpectralMode::Off),
            other => Err(crate::Error::Config(format!("unknown spectral mode '{other}'"))),
        }
    }
}

/// Symmetric `n x n` cosine and sine tables of the DFT kernel.
fn tables<T: Scalar>(n: usize) -> (Vec<T>, Vec<T>) {
    let mut cos = vec![T::zero(); n * n];
    let mut sin = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            // Reduce the phase index exactly before converting to an angle.
            let theta = 2.0 * PI * ((i * j) % n) as f64 / n as f64;
            cos[i * n + j] = T::from_f64_lossy(theta.cos());
            sin[i * n + j] = T::from_f64_lossy(theta.sin());
        }
    }
    (cos, sin)
}

struct Plan<T> {
    l: usize,
    c: usize,
    cos_l: Vec<T>,
    sin_l: Vec<T>,
    cos_c: Vec<T>,
    sin_c: Vec<T>,
}

impl<T: Scalar> Plan<T> {
    fn new(l: usize, c: usize) -> Self {
        let (cos_l, sin_l) = tables(l);
        let (cos_c, sin_c) = tables(c);
        Self { l, c, cos_l, sin_l, cos_c, sin_c }
    }

    /// Real and imaginary parts of the spectrum of one `L x C` slice.
    fn spectrum(&self, x: &[T], re: &mut [T], im: &mut [T]) {
        let (l, c) = (self.l, self.c);
        let mut a = vec![T::zero(); l * c];
        let mut b = vec![T::zero(); l * c];
        gemm(false, false, l, c, c, x, &self.cos_c, T::zero(), &mut a);
        gemm(false, false, l, c, c, x, &self.sin_c, T::zero(), &mut b);
        // re = cosL a - sinL b ; im = -(sinL a + cosL b)
        gemm(false, false, l, c, l, &self.cos_l, &a, T::zero(), re);
        let mut tmp = vec![T::zero(); l * c];
        gemm(false, false, l, c, l, &self.sin_l, &b, T::zero(), &mut tmp);
        re.iter_mut().zip(&tmp).for_each(|(r, t)| *r = *r - *t);
        gemm(false, false, l, c, l, &self.sin_l, &a, T::zero(), im);
        gemm(false, false, l, c, l, &self.cos_l, &b, T::zero(), &mut tmp);
        im.iter_mut().zip(&tmp).for_each(|(v, t)| *v = -(*v + *t));
    }

    /// Accumulates the adjoint of the real and imaginary maps into `dx`.
    fn adjoint(&self, g_re: Option<&[T]>, g_im: Option<&[T]>, dx: &mut [T]) {
        let (l, c) = (self.l, self.c);
        let mut p = vec![T::zero(); l * c];
        let mut q = vec![T::zero(); l * c];
        let mut tmp = vec![T::zero(); l * c];
        if let Some(g) = g_re {
            // cosL g cosC - sinL g sinC
            gemm(false, false, l, c, l, &self.cos_l, g, T::zero(), &mut p);
            gemm(false, false, l, c, l, &self.sin_l, g, T::zero(), &mut q);
            gemm(false, false, l, c, c, &p, &self.cos_c, T::zero(), &mut tmp);
            dx.iter_mut().zip(&tmp).for_each(|(d, t)| *d = *d + *t);
            gemm(false, false, l, c, c, &q, &self.sin_c, T::zero(), &mut tmp);
            dx.iter_mut().zip(&tmp).for_each(|(d, t)| *d = *d - *t);
        }
        if let Some(g) = g_im {
            // -(sinL g cosC + cosL g sinC)
            gemm(false, false, l, c, l, &self.cos_l, g, T::zero(), &mut p);
            gemm(false, false, l, c, l, &self.sin_l, g, T::zero(), &mut q);
            gemm(false, false, l, c, c, &q, &self.cos_c, T::zero(), &mut tmp);
            dx.iter_mut().zip(&tmp).for_each(|(d, t)| *d = *d - *t);
            gemm(false, false, l, c, c, &p, &self.sin_c, T::zero(), &mut tmp);
            dx.iter_mut().zip(&tmp).for_each(|(d, t)| *d = *d - *t);
        }
    }
}

pub(crate) fn dft2_forward<T: Scalar>(x: &Tensor<T>, mode: SpectralMode) -> Tensor<T> {
    let [n, l, c] = x.shape()[..] else { unreachable!("checked by caller") };
    let mut out = Tensor::zeros(x.shape());
    if mode == SpectralMode::Off {
        return out;
    }
    let plan = Plan::<T>::new(l, c);
    let mut re = vec![T::zero(); l * c];
    let mut im = vec![T::zero(); l * c];
    for s in 0..n {
        let xs = &x.data()[s * l * c..][..l * c];
        plan.spectrum(xs, &mut re, &mut im);
        let dst = &mut out.data_mut()[s * l * c..][..l * c];
        match mode {
            SpectralMode::Real => dst.copy_from_slice(&re),
            SpectralMode::Imag => dst.copy_from_slice(&im),
            SpectralMode::Amplitude => {
                for ((d, r), i) in dst.iter_mut().zip(&re).zip(&im) {
                    *d = r.hypot(*i);
                }
            }
            SpectralMode::Off => unreachable!(),
        }
    }
    out
}

pub(crate) fn dft2_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, mode: SpectralMode) -> Tensor<T> {
    let [n, l, c] = x.shape()[..] else { unreachable!("checked by caller") };
    let mut dx = Tensor::zeros(x.shape());
    if mode == SpectralMode::Off {
        return dx;
    }
    let plan = Plan::<T>::new(l, c);
    let mut re = vec![T::zero(); l * c];
    let mut im = vec![T::zero(); l * c];
    for s in 0..n {
        let g = &gy.data()[s * l * c..][..l * c];
        let dxs = &mut dx.data_mut()[s * l * c..][..l * c];
        match mode {
            SpectralMode::Real => plan.adjoint(Some(g), None, dxs),
            SpectralMode::Imag => plan.adjoint(None, Some(g), dxs),
            SpectralMode::Amplitude => {
                plan.spectrum(&x.data()[s * l * c..][..l * c], &mut re, &mut im);
                let mut g_re = vec![T::zero(); l * c];
                let mut g_im = vec![T::zero(); l * c];
                for k in 0..l * c {
                    let amp = re[k].hypot(im[k]);
                    // Subgradient 0 at the origin of the complex plane.
                    if amp > T::zero() {
                        g_re[k] = g[k] * re[k] / amp;
                        g_im[k] = g[k] * im[k] / amp;
                    }
                }
                plan.adjoint(Some(&g_re), Some(&g_im), dxs);
            }
            SpectralMode::Off => unreachable!(),
        }
    }
    dx
}
