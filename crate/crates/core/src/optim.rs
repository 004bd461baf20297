//! First-order optimisers operating in place on a [`ParamStore`].

use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    steps: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, steps: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from each parameter's `grad`; frozen parameters
    /// and parameters without a gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.steps += 1;
        let n = store.len();
        self.first.resize_with(n, || None);
        self.second.resize_with(n, || None);
        let lr = self.lr;
        let t = self.steps as f64;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let value = p.value.data_mut();
            let g = g.data();
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = T::from_f64(lr);
                    for (v, &gi) in value.iter_mut().zip(g) {
                        *v -= lr * gi;
                    }
                }
                OptimizerKind::Momentum { momentum } => {
                    let buf = state_for(&mut self.first[i], p.value.shape());
                    let (mu, lr) = (T::from_f64(momentum), T::from_f64(lr));
                    for ((v, &gi), b) in p.value.data_mut().iter_mut().zip(g).zip(buf.data_mut()) {
                        *b = mu * *b + gi;
                        *v -= lr * *b;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let shape = p.value.shape().to_vec();
                    let m = state_for(&mut self.first[i], &shape);
                    let s = state_for(&mut self.second[i], &shape);
                    let step = lr * libm::sqrt(1.0 - libm::pow(beta2, t)) / (1.0 - libm::pow(beta1, t));
                    let (b1, b2, step, eps) =
                        (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(step), T::from_f64(eps));
                    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                    for (((v, &gi), mi), si) in
                        p.value.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(s.data_mut())
                    {
                        *mi = b1 * *mi + one_b1 * gi;
                        *si = b2 * *si + one_b2 * gi * gi;
                        *v -= step * *mi / (si.sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn state_for<'a, T: Scalar>(slot: &'a mut Option<Tensor<T>>, shape: &[usize]) -> &'a mut Tensor<T> {
    if slot.as_ref().is_none_or(|t| t.shape() != shape) {
        *slot = Some(Tensor::zeros(shape));
    }
    slot.as_mut().unwrap()
}
