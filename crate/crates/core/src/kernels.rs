//! Dense raster kernels shared by the tape and the tests' oracles.

use crate::scalar::Scalar;

/// Geometry of a zero-padded "same" 2D convolution on an HWC raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_w: usize,
    pub in_h: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn out_pixels(&self) -> usize {
        self.out_w() * self.out_h()
    }

    /// Row length of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    pub fn weight_len(&self) -> usize {
        self.patch_len() * self.cout
    }
}

/// Unfolds `x` into a `(out_pixels x k*k*cin)` patch matrix.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (ow, oh, pl, pad) = (g.out_w(), g.out_h(), g.patch_len(), g.pad() as isize);
    let mut cols = vec![T::zero(); ow * oh * pl];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
            for ky in 0..g.k {
                let iy = (oy * g.stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.in_w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the raster.
pub fn col2im_acc<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (ow, oh, pl, pad) = (g.out_w(), g.out_h(), g.patch_len(), g.pad() as isize);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
            for ky in 0..g.k {
                let iy = (oy * g.stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.in_w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
