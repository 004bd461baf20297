//! Slice-level forward/backward kernels behind the tape operations.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, MatRef, Scalar};

/// Stride/padding/dilation/grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Conv2dGeom { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dGeom { stride, padding, dilation, groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// `floor((in + 2·pad − dilation·(k−1) − 1)/stride) + 1`, or `None` when no
    /// output pixel fits.
    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    fn cin_g(&self, g: &Conv2dGeom) -> usize {
        self.cin / g.groups
    }
    fn cout_g(&self, g: &Conv2dGeom) -> usize {
        self.cout / g.groups
    }
    fn col_rows(&self, g: &Conv2dGeom) -> usize {
        self.cin_g(g) * self.kh * self.kw
    }
}

/// Valid output range `[lo, hi)` for one kernel tap along one axis.
#[inline]
fn tap_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    // in = out·stride + offset must satisfy 0 <= in < in_len
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if (in_len as isize) - offset <= 0 { 0 } else { ((in_len as isize) - offset - 1) / s + 1 };
    let lo = (lo as usize).min(out_len);
    let hi = (hi.max(0) as usize).min(out_len);
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(plane0: &[T], d: &ConvDims, g: &Conv2dGeom, c_first: usize, col: &mut [T]) {
    let p = d.oh * d.ow;
    let hw = d.h * d.w;
    let cin_g = d.cin_g(g);
    for ci in 0..cin_g {
        let plane = &plane0[(c_first + ci) * hw..(c_first + ci + 1) * hw];
        for ki in 0..d.kh {
            let off_y = (ki * g.dilation) as isize - g.padding as isize;
            let (ylo, yhi) = tap_range(d.oh, d.h, g.stride, off_y);
            for kj in 0..d.kw {
                let off_x = (kj * g.dilation) as isize - g.padding as isize;
                let (xlo, xhi) = tap_range(d.ow, d.w, g.stride, off_x);
                let row = (ci * d.kh + ki) * d.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                dst.fill(T::zero());
                for oy in ylo..yhi {
                    let iy = (oy * g.stride) as isize + off_y;
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let drow = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if g.stride == 1 {
                        let ix0 = (xlo as isize + off_x) as usize;
                        drow[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = src[((ox * g.stride) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], d: &ConvDims, g: &Conv2dGeom, c_first: usize, dx0: &mut [T]) {
    let p = d.oh * d.ow;
    let hw = d.h * d.w;
    for ci in 0..d.cin_g(g) {
        let plane = &mut dx0[(c_first + ci) * hw..(c_first + ci + 1) * hw];
        for ki in 0..d.kh {
            let off_y = (ki * g.dilation) as isize - g.padding as isize;
            let (ylo, yhi) = tap_range(d.oh, d.h, g.stride, off_y);
            for kj in 0..d.kw {
                let off_x = (kj * g.dilation) as isize - g.padding as isize;
                let (xlo, xhi) = tap_range(d.ow, d.w, g.stride, off_x);
                let row = (ci * d.kh + ki) * d.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = ((oy * g.stride) as isize + off_y) as usize;
                    let dst = &mut plane[iy * d.w..(iy + 1) * d.w];
                    let srow = &src[oy * d.ow..(oy + 1) * d.ow];
                    for ox in xlo..xhi {
                        dst[((ox * g.stride) as isize + off_x) as usize] += srow[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    g: &Conv2dGeom,
) -> Vec<T> {
    let p = d.oh * d.ow;
    let (cin_g, cout_g, krows) = (d.cin_g(g), d.cout_g(g), d.col_rows(g));
    let mut y = vec![T::zero(); d.n * d.cout * p];
    let pointwise = g.is_pointwise(d.kh, d.kw);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); krows * p] };
    for n in 0..d.n {
        let xn = &x[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
        let yn = &mut y[n * d.cout * p..(n + 1) * d.cout * p];
        for grp in 0..g.groups {
            let cols: &[T] = if pointwise {
                &xn[grp * cin_g * p..(grp + 1) * cin_g * p]
            } else {
                im2col(xn, d, g, grp * cin_g, &mut col);
                &col
            };
            let wg = &w[grp * cout_g * krows..(grp + 1) * cout_g * krows];
            gemm(
                MatRef::row_major(wg, cout_g, krows),
                MatRef::row_major(cols, krows, p),
                T::zero(),
                &mut yn[grp * cout_g * p..(grp + 1) * cout_g * p],
            );
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut yn[co * p..(co + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &ConvDims,
    g: &Conv2dGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let p = d.oh * d.ow;
    let (cin_g, cout_g, krows) = (d.cin_g(g), d.cout_g(g), d.col_rows(g));
    let chw = d.cin * d.h * d.w;
    let mut dx = need[0].then(|| vec![T::zero(); d.n * chw]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); d.cout];
        for n in 0..d.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = (n * d.cout + co) * p;
                *acc += dy[off..off + p].iter().copied().sum::<T>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise(d.kh, d.kw);
    let mut col = vec![T::zero(); if pointwise { 0 } else { krows * p }];
    let mut dcol = vec![T::zero(); if need[0] && !pointwise { krows * p } else { 0 }];
    for n in 0..d.n {
        let xn = &x[n * chw..(n + 1) * chw];
        let dyn_ = &dy[n * d.cout * p..(n + 1) * d.cout * p];
        for grp in 0..g.groups {
            let dyg = MatRef::row_major(&dyn_[grp * cout_g * p..(grp + 1) * cout_g * p], cout_g, p);
            let wg_range = grp * cout_g * krows..(grp + 1) * cout_g * krows;
            if let Some(dw) = dw.as_mut() {
                let cols: &[T] = if pointwise {
                    &xn[grp * cin_g * p..(grp + 1) * cin_g * p]
                } else {
                    im2col(xn, d, g, grp * cin_g, &mut col);
                    &col
                };
                gemm(dyg, MatRef::row_major(cols, krows, p).t(), T::one(), &mut dw[wg_range.clone()]);
            }
            if let Some(dx) = dx.as_mut() {
                let wg = MatRef::row_major(&w[wg_range], cout_g, krows).t();
                let dxn = &mut dx[n * chw..(n + 1) * chw];
                if pointwise {
                    gemm(wg, dyg, T::one(), &mut dxn[grp * cin_g * p..(grp + 1) * cin_g * p]);
                } else {
                    gemm(wg, dyg, T::zero(), &mut dcol);
                    col2im(&dcol, d, g, grp * cin_g, dxn);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Source taps for bilinear resampling with half-pixel centres.
pub(crate) fn bilinear_taps(in_len: usize, scale: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..in_len * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, scale: usize) -> Vec<T> {
    let (oh, ow) = (h * scale, w * scale);
    let ty = bilinear_taps(h, scale);
    let tx = bilinear_taps(w, scale);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                dst[oy * ow + ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, scale: usize) -> Vec<T> {
    let (oh, ow) = (h * scale, w * scale);
    let ty = bilinear_taps(h, scale);
    let tx = bilinear_taps(w, scale);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let g = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    dx
}

/// Mean over non-overlapping `factor × factor` blocks of each plane.
pub fn area_downsample<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::from_f64(1.0 / (factor * factor) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..factor {
                    let row = pl * h * w + (oy * factor + dy) * w + ox * factor;
                    acc += x[row..row + factor].iter().copied().sum::<T>();
                }
                out[pl * oh * ow + oy * ow + ox] = acc * norm;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_range_matches_bruteforce() {
        for out_len in 1..6 {
            for in_len in 1..6 {
                for stride in 1..4 {
                    for offset in -6isize..6 {
                        let (lo, hi) = tap_range(out_len, in_len, stride, offset);
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride) as isize + offset;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "out {out_len} in {in_len} s {stride} off {offset}");
                    }
                }
            }
        }
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = area_downsample(&x, 1, 4, 4, 2);
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
