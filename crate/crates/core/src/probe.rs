//! Linear posture probe over frozen keypoint descriptors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::SpmkdModel;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Posture {
    Supine,
    LeftLateral,
    RightLateral,
}

impl Posture {
    pub const ALL: [Posture; 3] = [Posture::Supine, Posture::LeftLateral, Posture::RightLateral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Posture::Supine => "supine",
            Posture::LeftLateral => "left-lateral",
            Posture::RightLateral => "right-lateral",
        }
    }

    pub fn parse(s: &str) -> Option<Posture> {
        Posture::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    /// L2 penalty on the weights.
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { iterations: 500, lr: 0.5, weight_decay: 1e-3 }
    }
}

/// Multinomial logistic regression on standardised descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    /// `dim × 3`, row-major.
    pub weight: Vec<f64>,
    pub bias: [f64; 3],
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; 3]; 3],
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn logits(&self, x: &[f64]) -> [f64; 3] {
        let mut z = self.bias;
        for (j, &v) in x.iter().enumerate() {
            let v = (v - self.mean[j]) / self.scale[j];
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += v * self.weight[j * 3 + c];
            }
        }
        z
    }

    /// Ties resolve to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Posture {
        let z = self.logits(x);
        let mut best = 0;
        for c in 1..3 {
            if z[c] > z[best] {
                best = c;
            }
        }
        Posture::ALL[best]
    }
}

fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = z.map(|v| libm::exp(v - m));
    let s = e[0] + e[1] + e[2];
    e.map(|v| v / s)
}

fn check_rows(features: &[Vec<f64>], labels: &[Posture]) -> Result<usize> {
    if features.is_empty() {
        return Err(Error::DegenerateData("probe dataset is empty".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Dimension { op: "probe", detail: format!("{} rows, {} labels", features.len(), labels.len()) });
    }
    let d = features[0].len();
    if let Some(i) = features.iter().position(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Dimension { op: "probe", detail: format!("row {i} has wrong length or non-finite values") });
    }
    Ok(d)
}

/// Full-batch gradient descent for a fixed number of iterations.
pub fn fit_probe_features(features: &[Vec<f64>], labels: &[Posture], cfg: &ProbeConfig) -> Result<ProbeModel> {
    let d = check_rows(features, labels)?;
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::DegenerateData(format!("all {} samples are {}", labels.len(), labels[0].as_str())));
    }
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = features.iter().map(|r| (r[j] - mean[j]) * (r[j] - mean[j])).sum::<f64>() / n;
            let sd = libm::sqrt(var);
            if sd > 1e-12 { sd } else { 1.0 }
        })
        .collect();
    let mut m = ProbeModel { weight: vec![0.0; d * 3], bias: [0.0; 3], mean, scale };
    let xs: Vec<Vec<f64>> =
        features.iter().map(|r| r.iter().enumerate().map(|(j, v)| (v - m.mean[j]) / m.scale[j]).collect()).collect();
    let mut gw = vec![0.0; d * 3];
    for _ in 0..cfg.iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = [0.0; 3];
        for (x, &y) in xs.iter().zip(labels) {
            let mut z = m.bias;
            for (j, &v) in x.iter().enumerate() {
                for (zc, w) in z.iter_mut().zip(&m.weight[j * 3..j * 3 + 3]) {
                    *zc += v * w;
                }
            }
            let mut p = softmax3(z);
            p[y.index()] -= 1.0;
            for (g, pc) in gb.iter_mut().zip(p) {
                *g += pc / n;
            }
            for (j, &v) in x.iter().enumerate() {
                for c in 0..3 {
                    gw[j * 3 + c] += v * p[c] / n;
                }
            }
        }
        for (w, g) in m.weight.iter_mut().zip(&gw) {
            *w -= cfg.lr * (g + cfg.weight_decay * *w);
        }
        for (b, g) in m.bias.iter_mut().zip(gb) {
            *b -= cfg.lr * g;
        }
    }
    if m.weight.iter().any(|w| !w.is_finite()) {
        return Err(Error::Divergence { phase: "probe", epoch: cfg.iterations, loss: f64::NAN });
    }
    Ok(m)
}

pub fn evaluate_probe_features(probe: &ProbeModel, features: &[Vec<f64>], labels: &[Posture]) -> Result<ProbeReport> {
    let d = check_rows(features, labels)?;
    if d != probe.dim() {
        return Err(Error::Dimension { op: "probe", detail: format!("descriptor length {d}, probe expects {}", probe.dim()) });
    }
    let mut confusion = [[0usize; 3]; 3];
    for (x, &y) in features.iter().zip(labels) {
        confusion[y.index()][probe.predict(x).index()] += 1;
    }
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    Ok(ProbeReport { accuracy: correct as f64 / features.len() as f64, confusion })
}

/// Flattened `(k · 2f)` descriptors from a frozen model, one row per input
/// `(1, S, S)` map.
pub fn extract_descriptors<T: Scalar>(model: &SpmkdModel<T>, inputs: &[Tensor<T>], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let refs: Vec<&Tensor<T>> = chunk.iter().collect();
        for ks in model.keypoints(&refs)? {
            out.push(ks.descriptors.to_f64_vec());
        }
    }
    Ok(out)
}

pub fn fit_probe<T: Scalar>(
    model: &SpmkdModel<T>,
    inputs: &[Tensor<T>],
    labels: &[Posture],
    cfg: &ProbeConfig,
) -> Result<ProbeModel> {
    fit_probe_features(&extract_descriptors(model, inputs, 16)?, labels, cfg)
}

pub fn evaluate_probe<T: Scalar>(
    probe: &ProbeModel,
    model: &SpmkdModel<T>,
    inputs: &[Tensor<T>],
    labels: &[Posture],
) -> Result<ProbeReport> {
    if inputs.is_empty() {
        return Err(Error::DegenerateData("evaluation set is empty".into()));
    }
    evaluate_probe_features(probe, &extract_descriptors(model, inputs, 16)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_toy_data_is_learned() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            let jitter = (i as f64 * 0.618).fract() * 0.2;
            let mut row = vec![0.0; 3];
            row[c] = 1.0 + jitter;
            xs.push(row);
            ys.push(Posture::ALL[c]);
        }
        let m = fit_probe_features(&xs, &ys, &ProbeConfig::default()).unwrap();
        let r = evaluate_probe_features(&m, &xs, &ys).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for c in 0..3 {
            assert_eq!(r.confusion[c].iter().sum::<usize>(), 20);
        }
    }

    #[test]
    fn single_class_is_degenerate() {
        let xs = vec![vec![1.0], vec![2.0]];
        let ys = vec![Posture::Supine; 2];
        assert!(matches!(fit_probe_features(&xs, &ys, &ProbeConfig::default()), Err(Error::DegenerateData(_))));
        assert!(matches!(fit_probe_features(&[], &[], &ProbeConfig::default()), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn posture_names_roundtrip() {
        for p in Posture::ALL {
            assert_eq!(Posture::parse(p.as_str()), Some(p));
        }
        assert_eq!(Posture::parse("prone"), None);
    }
}
