//! Grouped, strided, dilated 2-D convolution via im2col + GEMM, and the
//! kernel-equals-stride transposed convolution used for upsampling.

use crate::error::{dim_err, Result};
use crate::linalg::gemm;
use crate::tensor::{Scalar, Tensor};

/// Hyper-parameters of a 2-D convolution, per axis `(h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self { stride: (stride, stride), padding: (padding, padding), dilation: (dilation, dilation), groups }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::new(1, 0, 1, 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geom {
    fn cg(&self) -> usize {
        self.c / self.spec.groups
    }
    fn og(&self) -> usize {
        self.o / self.spec.groups
    }
    fn ckk(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == (1, 1) && self.spec.padding == (0, 0)
    }
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], bias: Option<&[usize]>, spec: ConvSpec) -> Result<Geom> {
    let (n, c, h, wd) = match *x {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(dim_err!("conv2d input must be NCHW, got {:?}", x)),
    };
    let (o, ci, kh, kw) = match *w {
        [o, ci, kh, kw] => (o, ci, kh, kw),
        _ => return Err(dim_err!("conv2d weight must be OIHW, got {:?}", w)),
    };
    let g = spec.groups;
    if g == 0 || c % g != 0 || o % g != 0 || ci * g != c {
        return Err(dim_err!("conv2d group mismatch: input {:?}, weight {:?}, groups {}", x, w, g));
    }
    if spec.stride.0 == 0 || spec.stride.1 == 0 || spec.dilation.0 == 0 || spec.dilation.1 == 0 {
        return Err(dim_err!("conv2d stride and dilation must be positive"));
    }
    if let Some(b) = bias {
        if b != [o] {
            return Err(dim_err!("conv2d bias {:?} does not match weight {:?}", b, w));
        }
    }
    let eff_h = spec.dilation.0 * (kh - 1) + 1;
    let eff_w = spec.dilation.1 * (kw - 1) + 1;
    let ph = h + 2 * spec.padding.0;
    let pw = wd + 2 * spec.padding.1;
    if ph < eff_h || pw < eff_w {
        return Err(dim_err!("conv2d kernel {:?} (dilation {:?}) larger than padded input {:?}", w, spec.dilation, x));
    }
    let ho = (ph - eff_h) / spec.stride.0 + 1;
    let wo = (pw - eff_w) / spec.stride.1 + 1;
    Ok(Geom { n, c, h, w: wd, o, kh, kw, ho, wo, spec })
}

/// Gathers the receptive fields of group `g` of one sample into `cols`
/// (`ckk x hw_out`).
fn im2col<T: Scalar>(x: &[T], geo: &Geom, g: usize, cols: &mut [T]) {
    let (sh, sw) = geo.spec.stride;
    let (ph, pw) = geo.spec.padding;
    let (dh, dw) = geo.spec.dilation;
    let hw = geo.hw_out();
    let cg = geo.cg();
    for ci in 0..cg {
        let plane = &x[(g * cg + ci) * geo.h * geo.w..][..geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let dst = &mut cols[row * hw..][..hw];
                for oy in 0..geo.ho {
                    let iy = (oy * sh + ky * dh) as isize - ph as isize;
                    let line = &mut dst[oy * geo.wo..][..geo.wo];
                    if iy < 0 || iy >= geo.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * geo.w..][..geo.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kx * dw) as isize - pw as isize;
                        *v = if ix < 0 || ix >= geo.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back into `dx`.
fn col2im_add<T: Scalar>(cols: &[T], geo: &Geom, g: usize, dx: &mut [T]) {
    let (sh, sw) = geo.spec.stride;
    let (ph, pw) = geo.spec.padding;
    let (dh, dw) = geo.spec.dilation;
    let hw = geo.hw_out();
    let cg = geo.cg();
    for ci in 0..cg {
        let plane = &mut dx[(g * cg + ci) * geo.h * geo.w..][..geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let src = &cols[row * hw..][..hw];
                for oy in 0..geo.ho {
                    let iy = (oy * sh + ky * dh) as isize - ph as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * geo.w..][..geo.w];
                    for ox in 0..geo.wo {
                        let ix = (ox * sw + kx * dw) as isize - pw as isize;
                        if ix >= 0 && ix < geo.w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * geo.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, geo: &Geom) -> Tensor<T> {
    let mut out = Tensor::zeros(&[geo.n, geo.o, geo.ho, geo.wo]);
    let hw = geo.hw_out();
    let (ckk, og) = (geo.ckk(), geo.og());
    let in_sz = geo.c * geo.h * geo.w;
    let mut cols = if geo.pointwise() { Vec::new() } else { vec![T::zero(); ckk * hw] };
    let od = out.data_mut();
    for n in 0..geo.n {
        let xs = &x.data()[n * in_sz..][..in_sz];
        for g in 0..geo.spec.groups {
            let rhs: &[T] = if geo.pointwise() {
                &xs[g * ckk * hw..][..ckk * hw]
            } else {
                im2col(xs, geo, g, &mut cols);
                &cols
            };
            let wg = &w.data()[g * og * ckk..][..og * ckk];
            let dst = &mut od[(n * geo.o + g * og) * hw..][..og * hw];
            gemm(false, false, og, hw, ckk, wg, rhs, T::zero(), dst);
        }
        if let Some(b) = b {
            for o in 0..geo.o {
                let bv = b.data()[o];
                od[(n * geo.o + o) * hw..][..hw].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    geo: &Geom,
    need: (bool, bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let hw = geo.hw_out();
    let (ckk, og) = (geo.ckk(), geo.og());
    let in_sz = geo.c * geo.h * geo.w;
    let mut dx = need.0.then(|| Tensor::zeros(&[geo.n, geo.c, geo.h, geo.w]));
    let mut dw = need.1.then(|| Tensor::zeros(w.shape()));
    let mut cols = vec![T::zero(); ckk * hw];
    let mut dcols = vec![T::zero(); ckk * hw];
    for n in 0..geo.n {
        let xs = &x.data()[n * in_sz..][..in_sz];
        for g in 0..geo.spec.groups {
            let gys = &gy.data()[(n * geo.o + g * og) * hw..][..og * hw];
            let wg = &w.data()[g * og * ckk..][..og * ckk];
            if let Some(dw) = dw.as_mut() {
                let rhs: &[T] = if geo.pointwise() {
                    &xs[g * ckk * hw..][..ckk * hw]
                } else {
                    im2col(xs, geo, g, &mut cols);
                    &cols
                };
                let dwg = &mut dw.data_mut()[g * og * ckk..][..og * ckk];
                gemm(false, true, og, ckk, hw, gys, rhs, T::one(), dwg);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()[n * in_sz..][..in_sz];
                if geo.pointwise() {
                    let dst = &mut dxs[g * ckk * hw..][..ckk * hw];
                    gemm(true, false, ckk, hw, og, wg, gys, T::one(), dst);
                } else {
                    gemm(true, false, ckk, hw, og, wg, gys, T::zero(), &mut dcols);
                    col2im_add(&dcols, geo, g, dxs);
                }
            }
        }
    }
    let db = need.2.then(|| {
        let mut db = Tensor::zeros(&[geo.o]);
        for n in 0..geo.n {
            for o in 0..geo.o {
                let s: T = gy.data()[(n * geo.o + o) * hw..][..hw].iter().copied().sum();
                db.data_mut()[o] = db.data()[o] + s;
            }
        }
        db
    });
    (dx, dw, db)
}

/// Shapes of a transposed convolution whose kernel equals its stride.
pub(crate) fn conv_transpose_dims(
    x: &[usize],
    w: &[usize],
    bias: Option<&[usize]>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, wd) = match *x {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(dim_err!("conv_transpose input must be NCHW, got {:?}", x)),
    };
    let (ci, o, k) = match *w {
        [ci, o, kh, kw] if kh == kw && kh > 0 => (ci, o, kh),
        _ => return Err(dim_err!("conv_transpose weight must be C x O x k x k, got {:?}", w)),
    };
    if ci != c {
        return Err(dim_err!("conv_transpose input {:?} does not match weight {:?}", x, w));
    }
    if let Some(b) = bias {
        if b != [o] {
            return Err(dim_err!("conv_transpose bias {:?} does not match weight {:?}", b, w));
        }
    }
    Ok((n, c, h, wd, o, k))
}

pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, c, h, wd, o, k) = conv_transpose_dims(x.shape(), w.shape(), b.map(|b| b.shape()))?;
    let hw = h * wd;
    let okk = o * k * k;
    let mut out = Tensor::zeros(&[n, o, h * k, wd * k]);
    let mut y = vec![T::zero(); okk * hw];
    let (oh, ow) = (h * k, wd * k);
    for s in 0..n {
        let xs = &x.data()[s * c * hw..][..c * hw];
        gemm(true, false, okk, hw, c, w.data(), xs, T::zero(), &mut y);
        let od = &mut out.data_mut()[s * o * oh * ow..][..o * oh * ow];
        for oc in 0..o {
            let bv = b.map_or(T::zero(), |b| b.data()[oc]);
            for a in 0..k {
                for bb in 0..k {
                    let row = &y[((oc * k + a) * k + bb) * hw..][..hw];
                    for iy in 0..h {
                        for ix in 0..wd {
                            od[(oc * oh + iy * k + a) * ow + ix * k + bb] = row[iy * wd + ix] + bv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    need: (bool, bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, c, h, wd] = x.shape()[..] else { unreachable!() };
    let [_, o, k, _] = w.shape()[..] else { unreachable!() };
    let hw = h * wd;
    let okk = o * k * k;
    let (oh, ow) = (h * k, wd * k);
    let mut dx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut dw = need.1.then(|| Tensor::zeros(w.shape()));
    let mut db = need.2.then(|| Tensor::zeros(&[o]));
    let mut gcols = vec![T::zero(); okk * hw];
    for s in 0..n {
        let gs = &gy.data()[s * o * oh * ow..][..o * oh * ow];
        for oc in 0..o {
            for a in 0..k {
                for bb in 0..k {
                    let row = &mut gcols[((oc * k + a) * k + bb) * hw..][..hw];
                    for iy in 0..h {
                        for ix in 0..wd {
                            row[iy * wd + ix] = gs[(oc * oh + iy * k + a) * ow + ix * k + bb];
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[s * c * hw..][..c * hw];
            gemm(false, false, c, hw, okk, w.data(), &gcols, T::zero(), dst);
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * c * hw..][..c * hw];
            gemm(false, true, c, okk, hw, xs, &gcols, T::one(), dw.data_mut());
        }
        if let Some(db) = db.as_mut() {
            for oc in 0..o {
                let sum: T = gs[oc * oh * ow..][..oh * ow].iter().copied().sum();
                db.data_mut()[oc] = db.data()[oc] + sum;
            }
        }
    }
    (dx, dw, db)
}
