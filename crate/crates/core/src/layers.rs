//! Parameterised building blocks shared by the encoder, fuser and decoder.

use alloc::string::{String, ToString};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::kernels::Conv2dGeom;
use crate::opcount::LayerDesc;
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub geom: Conv2dGeom,
    /// Multiplier on the He-uniform bound.
    pub gain: f64,
}

impl Conv2d {
    /// Registers `{name}.weight` (OIHW, He-uniform) and `{name}.bias` (zeros).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: Conv2dGeom,
    ) -> Self {
        Self::with_gain(store, init, name, cin, cout, kernel, geom, 1.0)
    }

    /// As [`Conv2d::new`], with the init bound scaled by `gain` (kept for
    /// later re-initialisation). Used where several convolutions are summed.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: Conv2dGeom,
        gain: f64,
    ) -> Self {
        let cin_g = cin / geom.groups;
        let weight = store.add(&alloc::format!("{name}.weight"), Self::draw(init, cout, cin_g, kernel, gain));
        let bias = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2d { name: name.to_string(), weight, bias, cin, cout, kernel, geom, gain }
    }

    fn draw<T: Scalar>(init: &mut Initializer, cout: usize, cin_g: usize, k: usize, gain: f64) -> Tensor<T> {
        let bound = gain * libm::sqrt(6.0 / (cin_g * k * k).max(1) as f64);
        init.uniform(&[cout, cin_g, k, k], bound)
    }

    /// Fresh He-uniform weights and zero bias for an already registered layer.
    pub fn reinit<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) {
        let cin_g = self.cin / self.geom.groups;
        store.get_mut(self.weight).value = Self::draw(init, self.cout, cin_g, self.kernel, self.gain);
        store.get_mut(self.bias).value = Tensor::zeros(&[self.cout]);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.geom)
    }

    pub fn out_size(&self, input: usize) -> usize {
        self.geom.out_size(input, self.kernel).unwrap_or(0)
    }

    pub fn describe(&self, in_hw: usize) -> LayerDesc {
        let o = self.out_size(in_hw);
        LayerDesc::Conv2d {
            name: self.name.clone(),
            cin: self.cin,
            cout: self.cout,
            kernel: self.kernel,
            groups: self.geom.groups,
            bias: true,
            out_h: o.into(),
            out_w: o.into(),
        }
    }
}

/// Fully connected layer with weight laid out `(inputs, outputs)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        let weight = store.add(&alloc::format!("{name}.weight"), init.he_uniform(&[inputs, outputs], inputs));
        let bias = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Linear { name: name.to_string(), weight, bias, inputs, outputs }
    }

    /// `x` is `(rows, inputs)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.fully_connected(x, p.var(self.weight), p.var(self.bias))
    }

    pub fn describe(&self, rows: usize) -> LayerDesc {
        LayerDesc::Linear { name: self.name.clone(), inputs: self.inputs, outputs: self.outputs, rows }
    }
}
