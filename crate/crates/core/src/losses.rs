//! Reconstruction and classification objectives plus evaluation metrics.
//!
//! SSIM here is the standard structural similarity ratio
//! `((2μaμb + c1)(2σab + c2)) / ((μa² + μb² + c1)(σa² + σb² + c2))`, averaged
//! over valid windows, with population (1/n) moments. The SSIM loss term is
//! `1 − SSIM`, so the combined objective `α·L2 + β·(1 − SSIM)` is zero at a
//! perfect reconstruction.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::kernels::Conv2dGeom;
use crate::tensor::{Scalar, Tensor};

/// Averaging window for the SSIM statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SsimWindow {
    /// `size × size` box filter.
    Uniform(usize),
    /// Normalised Gaussian of the given size and standard deviation.
    Gaussian { size: usize, sigma: f64 },
    /// One window covering the whole image.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub c1: f64,
    pub c2: f64,
    pub window: SsimWindow,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::for_range(1.0, 1.0, 1.0)
    }
}

impl LossConfig {
    /// Stabilisers `c1 = (0.01·R)²`, `c2 = (0.03·R)²` for dynamic range `R`,
    /// 7×7 uniform window.
    pub fn for_range(alpha: f64, beta: f64, range: f64) -> Self {
        LossConfig {
            alpha,
            beta,
            c1: (0.01 * range) * (0.01 * range),
            c2: (0.03 * range) * (0.03 * range),
            window: SsimWindow::Uniform(7),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::Parameter {
                op: "loss",
                detail: format!("alpha = {}, beta = {} (need >= 0 with a positive sum)", self.alpha, self.beta),
            });
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Parameter { op: "loss", detail: "c1 and c2 must be positive".into() });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Classification,
    Regression,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Classification => "classification",
            Phase::Regression => "regression",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "classification" => Some(Phase::Classification),
            "regression" => Some(Phase::Regression),
            _ => None,
        }
    }
}

/// One epoch of training metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: Phase,
    pub l1: f64,
    pub l2: f64,
    pub ssim: f64,
    pub fscore: f64,
}

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return dim_err(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// Mean squared per-pixel difference.
pub fn l2_loss_var<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target, "l2_loss")?;
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

fn window_kernel<T: Scalar>(window: SsimWindow, h: usize, w: usize) -> Result<Tensor<T>> {
    let (kh, kw, weights): (usize, usize, Vec<f64>) = match window {
        SsimWindow::Uniform(s) => (s, s, alloc::vec![1.0; s * s]),
        SsimWindow::Gaussian { size, sigma } => {
            let c = (size as f64 - 1.0) / 2.0;
            let g: Vec<f64> = (0..size).map(|i| libm::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma))).collect();
            (size, size, (0..size * size).map(|i| g[i / size] * g[i % size]).collect())
        }
        SsimWindow::Global => (h, w, alloc::vec![1.0; h * w]),
    };
    if kh == 0 || kh > h || kw > w {
        return dim_err("ssim", format!("window {kh}x{kw} does not fit a {h}x{w} image"));
    }
    let total: f64 = weights.iter().sum();
    Tensor::new(&[1, 1, kh, kw], weights.iter().map(|&v| T::from_f64(v / total)).collect())
}

/// SSIM averaged over all valid windows of every plane. Inputs are
/// `(N, C, H, W)`; each channel is treated as an independent image.
pub fn ssim_var<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    same_shape(tape, a, b, "ssim")?;
    let s = tape.shape(a).to_vec();
    if s.len() != 4 {
        return dim_err("ssim", format!("expected (N, C, H, W), got {s:?}"));
    }
    let (h, w) = (s[2], s[3]);
    let planes = [s[0] * s[1], 1, h, w];
    let kernel = tape.constant(window_kernel(cfg.window, h, w)?);
    let a = tape.reshape(a, &planes)?;
    let b = tape.reshape(b, &planes)?;
    let g = Conv2dGeom::default();
    let mu_a = tape.conv2d(a, kernel, None, g)?;
    let mu_b = tape.conv2d(b, kernel, None, g)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.conv2d(aa, kernel, None, g)?;
    let e_bb = tape.conv2d(bb, kernel, None, g)?;
    let e_ab = tape.conv2d(ab, kernel, None, g)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;
    let (c1, c2) = (T::from_f64(cfg.c1), T::from_f64(cfg.c2));
    let two = T::from_f64(2.0);

    let lum_num = tape.scale(mu_ab, two);
    let lum_num = tape.add_scalar(lum_num, c1);
    let cs_num = tape.scale(cov, two);
    let cs_num = tape.add_scalar(cs_num, c2);
    let num = tape.mul(lum_num, cs_num)?;

    let lum_den = tape.add(mu_aa, mu_bb)?;
    let lum_den = tape.add_scalar(lum_den, c1);
    let cs_den = tape.add(var_a, var_b)?;
    let cs_den = tape.add_scalar(cs_den, c2);
    let den = tape.mul(lum_den, cs_den)?;

    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// `α·L2 + β·(1 − SSIM)`. Terms with zero weight are not evaluated.
pub fn combined_loss_var<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let mut total: Option<Var> = None;
    if cfg.alpha != 0.0 {
        let l2 = l2_loss_var(tape, pred, target)?;
        total = Some(tape.scale(l2, T::from_f64(cfg.alpha)));
    }
    if cfg.beta != 0.0 {
        let s = ssim_var(tape, pred, target, cfg)?;
        let neg = tape.scale(s, T::from_f64(-cfg.beta));
        let term = tape.add_scalar(neg, T::from_f64(cfg.beta));
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("alpha + beta > 0"))
}

/// Mean negative log-likelihood of the true class; `probs` is `(N, 2, H, W)`
/// with channel pairs summing to one, `mask` is `(N, H, W)` row-major.
pub fn pixel_cross_entropy_var<T: Scalar>(tape: &mut Tape<T>, probs: Var, mask: &[bool]) -> Result<Var> {
    let s = tape.shape(probs).to_vec();
    if s.len() != 4 || s[1] != 2 {
        return dim_err("pixel_cross_entropy", format!("expected (N, 2, H, W), got {s:?}"));
    }
    let hw = s[2] * s[3];
    let d = tape.value(probs).data();
    let tol = if T::DTYPE == crate::tensor::DType::F32 { 1e-4 } else { 1e-6 };
    for n in 0..s[0] {
        for p in 0..hw {
            let sum = d[n * 2 * hw + p] + d[n * 2 * hw + hw + p];
            if (sum.as_f64() - 1.0).abs() > tol || d[n * 2 * hw + p] < T::zero() || d[n * 2 * hw + hw + p] < T::zero() {
                return Err(Error::Contract(format!(
                    "class probabilities at sample {n} pixel {p} sum to {sum}, not 1"
                )));
            }
        }
    }
    tape.pixel_nll(probs, mask, T::epsilon())
}

fn eval_scalar<T: Scalar>(f: impl FnOnce(&mut Tape<T>) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v).data()[0].as_f64())
}

fn as_4d<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    let shape = match s.len() {
        2 => [1, 1, s[0], s[1]],
        3 => [1, s[0], s[1], s[2]],
        4 => [s[0], s[1], s[2], s[3]],
        _ => return dim_err("loss", format!("unsupported shape {s:?}")),
    };
    t.clone().reshape(&shape)
}

pub fn l2_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    eval_scalar(|t| {
        let (a, b) = (t.constant(pred.clone()), t.constant(target.clone()));
        l2_loss_var(t, a, b)
    })
}

pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return dim_err("l1_loss", format!("{:?} vs {:?}", pred.shape(), target.shape()));
    }
    let total: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
    Ok(total / pred.len() as f64)
}

/// SSIM of two images shaped `(H, W)`, `(C, H, W)` or `(N, C, H, W)`.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err("ssim", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let (a, b) = (as_4d(a)?, as_4d(b)?);
    eval_scalar(|t| {
        let (x, y) = (t.constant(a), t.constant(b));
        ssim_var(t, x, y, cfg)
    })
}

pub fn combined_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    if pred.shape() != target.shape() {
        return dim_err("combined_loss", format!("{:?} vs {:?}", pred.shape(), target.shape()));
    }
    let (a, b) = (as_4d(pred)?, as_4d(target)?);
    eval_scalar(|t| {
        let (x, y) = (t.constant(a), t.constant(b));
        combined_loss_var(t, x, y, cfg)
    })
}

pub fn pixel_cross_entropy<T: Scalar>(probs: &Tensor<T>, mask: &[bool]) -> Result<f64> {
    let p = as_4d(probs)?;
    eval_scalar(|t| {
        let x = t.constant(p);
        pixel_cross_entropy_var(t, x, mask)
    })
}

/// Harmonic mean of precision and recall on the positive class; 0 when
/// neither mask has a positive.
pub fn f_score(pred: &[bool], target: &[bool]) -> Result<f64> {
    if pred.len() != target.len() {
        return dim_err("f_score", format!("{} vs {} pixels", pred.len(), target.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Pixels where the "present" channel wins, for `(N, 2, H, W)` probabilities.
pub fn presence_mask<T: Scalar>(probs: &Tensor<T>) -> Vec<bool> {
    let s = probs.shape();
    let hw = s[2] * s[3];
    let d = probs.data();
    (0..s[0] * hw)
        .map(|i| {
            let (n, p) = (i / hw, i % hw);
            d[(n * 2 + 1) * hw + p] > d[n * 2 * hw + p]
        })
        .collect()
}
