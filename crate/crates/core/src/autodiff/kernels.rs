//! Raw-slice kernels for the spatial operators. All buffers are row-major
//! NCHW.

use super::Real;

/// Geometry of a stride-1, zero-padded ("same") square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn patch(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Unfolds `x` into a `[n*h*w, c*k*k]` patch matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: ConvGeom) -> Vec<T> {
    let (hw, patch, pad) = (g.h * g.w, g.patch(), g.pad());
    let mut cols = vec![T::zero(); g.rows() * patch];
    for n in 0..g.n {
        for c in 0..g.c {
            let plane = &x[(n * g.c + c) * hw..(n * g.c + c + 1) * hw];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let col = (c * g.k + ky) * g.k + kx;
                    for oy in 0..g.h {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row_base = (n * g.h + oy) * g.w;
                        for ox in 0..g.w {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            cols[(row_base + ox) * patch + col] = plane[iy as usize * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im<T: Real>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let (hw, patch, pad) = (g.h * g.w, g.patch(), g.pad());
    let mut x = vec![T::zero(); g.n * g.c * hw];
    for n in 0..g.n {
        for c in 0..g.c {
            let base = (n * g.c + c) * hw;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let col = (c * g.k + ky) * g.k + kx;
                    for oy in 0..g.h {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row_base = (n * g.h + oy) * g.w;
                        for ox in 0..g.w {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            x[base + iy as usize * g.w + ix as usize] += cols[(row_base + ox) * patch + col];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n*h*w, o]` (pixel-major) to `[n, o, h, w]`.
pub(crate) fn pixels_to_nchw<T: Real>(m: &[T], n: usize, o: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o * hw];
    for b in 0..n {
        for p in 0..hw {
            let src = &m[(b * hw + p) * o..(b * hw + p + 1) * o];
            for (ch, &v) in src.iter().enumerate() {
                out[(b * o + ch) * hw + p] = v;
            }
        }
    }
    out
}

/// Inverse of [`pixels_to_nchw`].
pub(crate) fn nchw_to_pixels<T: Real>(x: &[T], n: usize, o: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o * hw];
    for b in 0..n {
        for ch in 0..o {
            let src = &x[(b * o + ch) * hw..(b * o + ch + 1) * hw];
            for (p, &v) in src.iter().enumerate() {
                out[(b * hw + p) * o + ch] = v;
            }
        }
    }
    out
}

/// 2x2 stride-2 max pooling. Returns the pooled values and, for every
/// output cell, the flat input index of the selected maximum (first wins).
pub(crate) fn max_pool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
