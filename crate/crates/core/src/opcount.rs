//! Analytic FLOP and parameter counting.
//!
//! Convention: one multiply-accumulate is two FLOPs. Only convolutions and
//! fully connected layers contribute FLOPs; bias additions, activations,
//! resampling and elementwise sums are not counted. Parameters include biases.
//! No normalisation layers exist in the model, so none are counted.

use alloc::format;
use alloc::string::String;
use core::ops::{Add, AddAssign};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub flops: u64,
    pub params: u64,
}

impl Add for OpCount {
    type Output = OpCount;
    fn add(self, rhs: OpCount) -> OpCount {
        OpCount { flops: self.flops + rhs.flops, params: self.params + rhs.params }
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: OpCount) {
        *self = *self + rhs;
    }
}

impl core::iter::Sum for OpCount {
    fn sum<I: Iterator<Item = OpCount>>(iter: I) -> OpCount {
        iter.fold(OpCount::default(), Add::add)
    }
}

/// A spatial extent that is either known statically or only at run time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extent {
    Static(usize),
    Dynamic,
}

impl From<usize> for Extent {
    fn from(v: usize) -> Self {
        Extent::Static(v)
    }
}

/// Static description of one layer, sufficient to count its cost.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerDesc {
    Conv2d {
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
        /// Output spatial size.
        out_h: Extent,
        out_w: Extent,
    },
    Linear {
        name: String,
        inputs: usize,
        outputs: usize,
        /// Number of rows pushed through the layer per forward pass.
        rows: usize,
    },
    /// A parameter-free step, listed for completeness.
    Free { name: String },
}

impl LayerDesc {
    pub fn name(&self) -> &str {
        match self {
            LayerDesc::Conv2d { name, .. } | LayerDesc::Linear { name, .. } | LayerDesc::Free { name } => name,
        }
    }

    pub fn count(&self) -> Result<OpCount> {
        match *self {
            LayerDesc::Conv2d { ref name, cin, cout, kernel, groups, bias, out_h, out_w } => {
                let (Extent::Static(h), Extent::Static(w)) = (out_h, out_w) else {
                    return Err(Error::Unsupported(format!("layer {name} has a dynamic spatial shape")));
                };
                let per_out = (cin / groups * kernel * kernel) as u64;
                let weights = cout as u64 * per_out;
                Ok(OpCount {
                    flops: 2 * weights * (h * w) as u64,
                    params: weights + if bias { cout as u64 } else { 0 },
                })
            }
            LayerDesc::Linear { inputs, outputs, rows, .. } => {
                let weights = (inputs * outputs) as u64;
                Ok(OpCount { flops: 2 * weights * rows as u64, params: weights + outputs as u64 })
            }
            LayerDesc::Free { .. } => Ok(OpCount::default()),
        }
    }
}

/// Sum of the per-layer counts.
pub fn count_ops(layers: &[LayerDesc]) -> Result<OpCount> {
    layers.iter().map(LayerDesc::count).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn conv(name: &str, cin: usize, cout: usize, k: usize, hw: usize) -> LayerDesc {
        LayerDesc::Conv2d {
            name: name.to_string(),
            cin,
            cout,
            kernel: k,
            groups: 1,
            bias: true,
            out_h: hw.into(),
            out_w: hw.into(),
        }
    }

    #[test]
    fn conv3x3_one_to_eight() {
        let c = conv("c", 1, 8, 3, 64).count().unwrap();
        assert_eq!(c.params, 80);
        assert_eq!(c.flops, 2 * 8 * 9 * 64 * 64);
    }

    #[test]
    fn linear_100_to_50() {
        let l = LayerDesc::Linear { name: "fc".into(), inputs: 100, outputs: 50, rows: 1 };
        assert_eq!(l.count().unwrap(), OpCount { flops: 10_000, params: 5050 });
    }

    #[test]
    fn stack_is_additive() {
        let a = conv("a", 1, 8, 3, 64);
        let b = conv("b", 8, 16, 3, 32);
        let total = count_ops(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(total, a.count().unwrap() + b.count().unwrap());
        assert_eq!(total, count_ops(&[a, b]).unwrap());
    }

    #[test]
    fn depthwise_counts_one_input_channel_per_filter() {
        let d = LayerDesc::Conv2d {
            name: "dw".into(),
            cin: 32,
            cout: 32,
            kernel: 3,
            groups: 32,
            bias: true,
            out_h: 4.into(),
            out_w: 4.into(),
        };
        assert_eq!(d.count().unwrap().params, 32 * 9 + 32);
    }

    #[test]
    fn dynamic_shape_is_unsupported() {
        let d = LayerDesc::Conv2d {
            name: "dyn".into(),
            cin: 1,
            cout: 1,
            kernel: 3,
            groups: 1,
            bias: false,
            out_h: Extent::Dynamic,
            out_w: 8.into(),
        };
        assert!(matches!(count_ops(&[d]), Err(Error::Unsupported(_))));
    }
}
