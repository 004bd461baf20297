//! Central finite-difference audit of analytic gradients.
//!
//! Relative error per scalar is `|a − n| / max(|a|, |n|, floor)`; the floor
//! keeps parameters with vanishing gradients from reporting spurious blow-ups.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{combined_loss_var, pixel_cross_entropy_var, LossConfig};
use crate::model::SpmkdModel;
use crate::params::ParamStore;
use crate::rebuildnet::HeadMode;
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Probe at most this many evenly spaced entries per tensor.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-6, tolerance: 1e-6, floor: 1e-8, max_entries: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamAudit {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_analytic: f64,
    /// Number of scalars whose analytic gradient is exactly zero.
    pub zero_grads: usize,
    pub numel: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamAudit>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

fn probe_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
        _ => (0..n).collect(),
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients against central differences of `loss`.
///
/// `loss` receives the full parameter list and must be deterministic. Only
/// 64-bit tensors are accepted.
pub fn grad_check<T, F>(
    mut loss: F,
    params: &mut [(String, Tensor<T>)],
    analytic: &[Tensor<T>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&[(String, Tensor<T>)]) -> Result<f64>,
{
    if T::DTYPE != DType::F64 {
        return Err(Error::Audit("finite-difference checks require 64-bit tensors".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Audit("one analytic gradient per parameter required".into()));
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::Audit(alloc::format!("non-finite loss {base}")));
    }
    let mut audits = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let n = params[pi].1.len();
        let mut max_rel: f64 = 0.0;
        let full = analytic[pi].data();
        let max_abs = full.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
        let zeros = full.iter().filter(|v| v.as_f64() == 0.0).count();
        for i in probe_indices(n, cfg.max_entries) {
            let orig = params[pi].1.data()[i];
            params[pi].1.data_mut()[i] = T::from_f64(orig.as_f64() + cfg.step);
            let plus = loss(params)?;
            params[pi].1.data_mut()[i] = T::from_f64(orig.as_f64() - cfg.step);
            let minus = loss(params)?;
            params[pi].1.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Audit(alloc::format!("non-finite loss perturbing {}[{i}]", params[pi].0)));
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[pi].data()[i].as_f64();
            max_rel = max_rel.max(relative_error(a, numeric, cfg.floor));
        }
        audits.push(ParamAudit {
            name: params[pi].0.clone(),
            max_rel_err: max_rel,
            max_abs_analytic: max_abs,
            zero_grads: zeros,
            numel: n,
            passed: max_rel < cfg.tolerance,
        });
    }
    Ok(GradCheckReport { params: audits })
}

fn model_objective(
    model: &SpmkdModel<f64>,
    store: &ParamStore<f64>,
    tape: &mut Tape<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    loss: &LossConfig,
) -> Result<(crate::params::Bound, Var)> {
    let bound = store.bind(tape);
    let x = tape.constant(input.clone());
    let out = model.forward(tape, &bound, x)?.output;
    let l = match model.head_mode() {
        HeadMode::Regression => {
            let t = tape.constant(target.clone());
            combined_loss_var(tape, out, t, loss)?
        }
        HeadMode::Classification => {
            let mask: Vec<bool> = target.data().iter().map(|&v| v > 0.0).collect();
            pixel_cross_entropy_var(tape, out, &mask)?
        }
    };
    Ok((bound, l))
}

/// Gives every bias a small random value. Zero biases on an input with
/// exactly-zero background put whole regions of pre-activations on the relu
/// kink, where one-sided derivatives disagree and a finite difference cannot
/// match any analytic convention.
pub fn jitter_biases(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut init = crate::params::Initializer::new(seed);
    for p in store.iter_mut().filter(|p| p.name.ends_with(".bias")) {
        p.value = init.uniform(p.value.shape(), scale);
    }
}

/// Audits every parameter whose name starts with one of `prefixes` (all
/// parameters when empty) on one batch: `input` is `(N, 1, S, S)`, `target`
/// `(N, 1, R, R)`. Regression heads are scored with the combined loss,
/// classification heads with pixel cross-entropy against `target > 0`.
pub fn audit_model(
    model: &SpmkdModel<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    loss: &LossConfig,
    prefixes: &[&str],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let selected: Vec<_> = model
        .params
        .iter()
        .filter(|(_, p)| prefixes.is_empty() || prefixes.iter().any(|x| p.name.starts_with(x)))
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    let mut tape = Tape::new();
    let (bound, l) = model_objective(model, &model.params, &mut tape, input, target, loss)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<Tensor<f64>> = selected
        .iter()
        .map(|(id, _)| grads.get(bound.var(*id)).cloned().unwrap_or_else(|| Tensor::zeros(model.params.value(*id).shape())))
        .collect();
    drop(tape);
    let mut params: Vec<(String, Tensor<f64>)> =
        selected.iter().map(|(id, name)| (name.clone(), model.params.value(*id).clone())).collect();
    let mut work = model.params.clone();
    grad_check(
        |p| {
            for ((id, _), (_, v)) in selected.iter().zip(p) {
                work.get_mut(*id).value.data_mut().copy_from_slice(v.data());
            }
            let mut tape = Tape::new();
            let (_, l) = model_objective(model, &work, &mut tape, input, target, loss)?;
            Ok(tape.value(l).data()[0])
        },
        &mut params,
        &analytic,
        cfg,
    )
}
