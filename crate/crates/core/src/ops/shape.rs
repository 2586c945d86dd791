//! Structural kernels: permutation, concatenation, slicing and 3x3 unfold.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::tensor::{for_each_offset2, strides, Scalar, Tensor};

pub(crate) fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let st = strides(x.shape());
    let src_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let zero = vec![0; perm.len()];
    let xd = x.data();
    let mut data = Vec::with_capacity(x.numel());
    for_each_offset2(&out_shape, &src_strides, &zero, |_, o, _| data.push(xd[o]));
    Tensor::new(&out_shape, data).expect("permute preserves numel")
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, inner)` extents around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

pub(crate) fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let mut shape = xs[0].shape().to_vec();
    shape[axis] = xs.iter().map(|t| t.shape()[axis]).sum();
    let (outer, inner) = split_at_axis(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in xs {
            let len = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * len..][..len]);
        }
    }
    Tensor::new(&shape, data).expect("concat shape")
}

pub(crate) fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let mut shape = x.shape().to_vec();
    let full = shape[axis];
    shape[axis] = len;
    let (outer, inner) = split_at_axis(&shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        data.extend_from_slice(&x.data()[(o * full + start) * inner..][..len * inner]);
    }
    Tensor::new(&shape, data).expect("narrow shape")
}

/// Adjoint of [`narrow`]: writes `g` into a zero tensor of `full_shape`.
pub(crate) fn narrow_backward<T: Scalar>(g: &Tensor<T>, full_shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(full_shape);
    let len = g.shape()[axis];
    let full = full_shape[axis];
    let (outer, inner) = split_at_axis(full_shape, axis);
    for o in 0..outer {
        out.data_mut()[(o * full + start) * inner..][..len * inner]
            .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
    }
    out
}

/// Offsets of the 3x3 neighbourhood in kernel-position order (row-major).
pub(crate) const NEIGHBOURS: [(isize, isize); 9] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Fault injection for the self-test mutation fixture: when set, unfold
/// reads one column too far right.
pub(crate) static UNFOLD_OFF_BY_ONE: AtomicBool = AtomicBool::new(false);

/// `N x C x H x W -> N x (C*9) x (H*W)`, zero padding 1, stride 1. Row
/// `c*9 + k` holds channel `c` at kernel position `k`.
pub(crate) fn unfold3x3<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape()[..] else { unreachable!("checked by caller") };
    let hw = h * w;
    let skew = UNFOLD_OFF_BY_ONE.load(Ordering::Relaxed) as isize;
    let mut out = Tensor::zeros(&[n, c * 9, hw]);
    for nc in 0..n * c {
        let src = &x.data()[nc * hw..][..hw];
        for (k, &(dy, dx)) in NEIGHBOURS.iter().enumerate() {
            let dx = dx + skew;
            let dst = &mut out.data_mut()[(nc * 9 + k) * hw..][..hw];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        dst[y * w + xx] = src[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    out
}

/// Overlap-adding fold, the adjoint of [`unfold3x3`].
pub(crate) fn fold3x3<T: Scalar>(cols: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let [n, c, h, w] = in_shape[..] else { unreachable!("checked by caller") };
    let hw = h * w;
    let mut out = Tensor::zeros(in_shape);
    for nc in 0..n * c {
        let dst = &mut out.data_mut()[nc * hw..][..hw];
        for (k, &(dy, dx)) in NEIGHBOURS.iter().enumerate() {
            let src = &cols.data()[(nc * 9 + k) * hw..][..hw];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        let i = sy as usize * w + sx as usize;
                        dst[i] = dst[i] + src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}
