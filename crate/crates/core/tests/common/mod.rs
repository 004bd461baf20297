//! Independent reference implementations used by the integration tests.
//! Everything here is written with plain loops in f64 and shares no code
//! with the library kernels.
#![allow(dead_code, clippy::too_many_arguments)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub struct ConvCase {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub groups: usize,
}

impl ConvCase {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        loop {
            let groups = [1, 1, 2][rng.random_range(0..3)];
            let cin = groups * rng.random_range(1..4);
            let cout = groups * rng.random_range(1..4);
            let k = rng.random_range(1..4);
            let dil = rng.random_range(1..3);
            let c = ConvCase {
                n: rng.random_range(1..3),
                cin,
                h: rng.random_range(3..10),
                w: rng.random_range(3..10),
                cout,
                k,
                stride: rng.random_range(1..3),
                pad: rng.random_range(0..3),
                dil,
                groups,
            };
            if c.out_h() >= 1 && c.out_w() >= 1 && c.h + 2 * c.pad > c.dil * (c.k - 1) && c.w + 2 * c.pad > c.dil * (c.k - 1) {
                return c;
            }
        }
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad).saturating_sub(self.dil * (self.k - 1) + 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad).saturating_sub(self.dil * (self.k - 1) + 1) / self.stride + 1
    }

    pub fn x_len(&self) -> usize {
        self.n * self.cin * self.h * self.w
    }

    pub fn w_len(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.k * self.k
    }
}

/// Direct six-loop grouped convolution (NCHW, OIHW), zero padding.
pub fn naive_conv(c: &ConvCase, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = (c.out_h(), c.out_w());
    let cg_in = c.cin / c.groups;
    let cg_out = c.cout / c.groups;
    let mut out = vec![0.0; c.n * c.cout * oh * ow];
    for n in 0..c.n {
        for o in 0..c.cout {
            let g = o / cg_out;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..cg_in {
                        let ic = g * cg_in + ci;
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = (oy * c.stride + ky * c.dil) as isize - c.pad as isize;
                                let ix = (ox * c.stride + kx * c.dil) as isize - c.pad as isize;
                                if iy < 0 || ix < 0 || iy >= c.h as isize || ix >= c.w as isize {
                                    continue;
                                }
                                let xv = x[((n * c.cin + ic) * c.h + iy as usize) * c.w + ix as usize];
                                let wv = w[((o * cg_in + ci) * c.k + ky) * c.k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * c.cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Triple-loop `(m, k) · (k, n)`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Bilinear resize by an integer factor with half-pixel sample centres and
/// edge clamping, written from the textbook formula.
pub fn naive_upsample(x: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let src = |d: usize, len: usize| -> (usize, usize, f64) {
        let p = ((d as f64 + 0.5) / s as f64 - 0.5).max(0.0);
        let i0 = (p.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = vec![0.0; h * s * w * s];
    for y in 0..h * s {
        let (y0, y1, fy) = src(y, h);
        for xx in 0..w * s {
            let (x0, x1, fx) = src(xx, w);
            let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
            let bot = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
            out[y * w * s + xx] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Keypoint descriptors by explicit per-pixel summation. `heat` is `(k, P)`,
/// `coords` `(3, P)`, `feats` `(f, P)`, `proj_w` `(3, f)`, `proj_b` `(f)`.
/// Returns `(k, 2f)`: projected positions then pooled features.
pub fn fuser_oracle(
    heat: &[f64],
    coords: &[f64],
    feats: &[f64],
    proj_w: &[f64],
    proj_b: &[f64],
    k: usize,
    f: usize,
    p: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(k * 2 * f);
    for i in 0..k {
        let s: Vec<f64> = (0..p).map(|j| 1.0 / (1.0 + (-heat[i * p + j]).exp())).collect();
        let total: f64 = s.iter().sum();
        let mut pos = [0.0; 3];
        let mut feat = vec![0.0; f];
        for j in 0..p {
            let wgt = s[j] / total;
            for (c, pc) in pos.iter_mut().enumerate() {
                *pc += wgt * coords[c * p + j];
            }
            for (c, fc) in feat.iter_mut().enumerate() {
                *fc += wgt * feats[c * p + j];
            }
        }
        for o in 0..f {
            out.push(proj_b[o] + (0..3).map(|c| pos[c] * proj_w[c * f + o]).sum::<f64>());
        }
        out.extend(feat);
    }
    out
}

/// Mean SSIM over all valid `win × win` windows of an `h × w` image, with
/// population statistics computed directly per window.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, win: usize, c1: f64, c2: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - win {
        for x in 0..=w - win {
            let mut pa = Vec::new();
            let mut pb = Vec::new();
            for dy in 0..win {
                for dx in 0..win {
                    pa.push(a[(y + dy) * w + x + dx]);
                    pb.push(b[(y + dy) * w + x + dx]);
                }
            }
            let n = pa.len() as f64;
            let ma = pa.iter().sum::<f64>() / n;
            let mb = pb.iter().sum::<f64>() / n;
            let va = pa.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / n;
            let vb = pb.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n;
            let cov = pa.iter().zip(&pb).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / n;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean negative log-probability of the true class, `probs` `(N, 2, H, W)`.
pub fn cross_entropy_oracle(probs: &[f64], mask: &[bool], n: usize, hw: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for p in 0..hw {
            let c = usize::from(mask[i * hw + p]);
            s -= probs[(i * 2 + c) * hw + p].max(f64::EPSILON).ln();
        }
    }
    s / (n * hw) as f64
}

/// Smooth non-negative blob on an `s × s` grid, peak 1 at `(cy, cx)`,
/// exactly zero beyond `radius`.
pub fn blob(s: usize, cy: f64, cx: f64, radius: f64) -> Vec<f32> {
    (0..s * s)
        .map(|i| {
            let (y, x) = ((i / s) as f64, (i % s) as f64);
            let d2 = ((y - cy).powi(2) + (x - cx).powi(2)) / (radius * radius);
            if d2 < 1.0 { ((1.0 - d2) * (1.0 - d2)) as f32 } else { 0.0 }
        })
        .collect()
}
