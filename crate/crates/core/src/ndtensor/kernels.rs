//! Forward and backward kernels over raw NCHW buffers.

use rayon::prelude::*;

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one `c_in x h x w` image into a `(c_in*kh*kw) x (h_out*w_out)` matrix.
fn im2col<T: Element>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        out[oy * g.w_out + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let idx = (c * g.h + iy as usize) * g.w + ix as usize;
                        dx[idx] = dx[idx] + src[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Element>(g: &ConvGeometry, batch: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * g.positions();
    let mut out = vec![T::zero(); batch * out_size];
    out.par_chunks_mut(out_size.max(1))
        .zip(x.par_chunks(in_size.max(1)))
        .for_each(|(y, xn)| {
            let p = g.positions();
            for (co, plane) in y.chunks_mut(p).enumerate() {
                plane.fill(b[co]);
            }
            if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
                T::gemm(g.c_out, g.c_in, p, w, false, xn, false, T::one(), y);
            } else {
                let mut cols = vec![T::zero(); g.patch() * p];
                im2col(g, xn, &mut cols);
                T::gemm(g.c_out, g.patch(), p, w, false, &cols, false, T::one(), y);
            }
        });
    out
}

/// Returns `(dx, dw, db)`. Per-item weight gradients are reduced in batch
/// order so the result does not depend on the thread schedule.
pub(crate) fn conv_backward<T: Element>(
    g: &ConvGeometry,
    batch: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * g.positions();
    let p = g.positions();
    let k = g.patch();
    let mut dx = vec![T::zero(); batch * in_size];
    let per_item: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(in_size.max(1))
        .zip(x.par_chunks(in_size.max(1)))
        .zip(dy.par_chunks(out_size.max(1)))
        .map(|((dxn, xn), dyn_)| {
            let mut dw = vec![T::zero(); g.c_out * k];
            let mut cols = vec![T::zero(); k * p];
            im2col(g, xn, &mut cols);
            T::gemm(g.c_out, p, k, dyn_, false, &cols, true, T::zero(), &mut dw);
            let mut dcols = vec![T::zero(); k * p];
            T::gemm(k, g.c_out, p, w, true, dyn_, false, T::zero(), &mut dcols);
            col2im(g, &dcols, dxn);
            let db = dyn_.chunks(p).map(|plane| plane.iter().copied().sum()).collect();
            (dw, db)
        })
        .collect();
    let mut dw = vec![T::zero(); g.c_out * k];
    let mut db = vec![T::zero(); g.c_out];
    for (dwn, dbn) in per_item {
        for (a, b) in dw.iter_mut().zip(dwn) {
            *a = *a + b;
        }
        for (a, b) in db.iter_mut().zip(dbn) {
            *a = *a + b;
        }
    }
    (dx, dw, db)
}

/// 2x2 stride-2 max pooling over `planes` planes of `h x w`. Returns the
/// pooled values and, per output, the flat input index of the maximum
/// (first index wins ties).
pub(crate) fn maxpool2_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn upsample2_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                out[(pl * ho + oy) * wo + ox] = x[(pl * h + oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let idx = (pl * h + oy / 2) * w + ox / 2;
                dx[idx] = dx[idx] + dy[(pl * ho + oy) * wo + ox];
            }
        }
    }
    dx
}
