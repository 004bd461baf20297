//! Pressure map → (keypoint heatmap H, feature grid F, positional grid C).
//!
//! The backbone is a reduced MobileNet-style stack: two stride-2 3×3
//! convolutions followed by inverted-residual blocks (1×1 expand, 3×3
//! depthwise, 1×1 project, identity shortcut). There is no batch
//! normalisation anywhere in the model. H and F come from two 1×1 heads on the
//! backbone output; C is a fixed coordinate grid.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::kernels::Conv2dGeom;
use crate::layers::Conv2d;
use crate::opcount::LayerDesc;
use crate::params::{Bound, Initializer, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Edge length of the sensor grid the encoder accepts.
pub const INPUT_SIZE: usize = 256;
/// Edge length of H, F and C.
pub const GRID_SIZE: usize = 64;

/// Single-channel non-negative sensor grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PressureMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub source: Option<String>,
}

impl PressureMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return dim_err("pressure_map", format!("{height}x{width} with {} values", values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Contract(format!("pressure at index {i} is {} (must be finite and >= 0)", values[i])));
        }
        Ok(PressureMap { height, width, values, source: None })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        PressureMap { height, width, values: vec![0.0; height * width], source: None }
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Values divided by the map maximum, as a `(1, H, W)` tensor. An all-zero
    /// map stays zero.
    pub fn to_unit_tensor<T: Scalar>(&self) -> Tensor<T> {
        let m = self.max();
        let inv = if m > 0.0 { 1.0 / m as f64 } else { 0.0 };
        Tensor::from_fn(&[1, self.height, self.width], |i| T::from_f64(self.values[i] as f64 * inv))
    }
}

/// Backbone family. Only the reduced stack is implemented; the variant
/// records that it stands in for MobileNet V3.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    ReducedInvertedResidual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Keypoint count.
    pub k: usize,
    /// Per-pixel feature length.
    pub f: usize,
    /// Output channels of each stride-2 stage.
    pub widths: Vec<usize>,
    /// Must be 2: two stride-2 stages give the fixed 256→64 mapping.
    pub downsample_stages: usize,
    pub residual_blocks: usize,
    pub expansion: usize,
    pub backbone: Backbone,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            k: 14,
            f: 8,
            widths: vec![8, 16],
            downsample_stages: 2,
            residual_blocks: 1,
            expansion: 2,
            backbone: Backbone::ReducedInvertedResidual,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.f == 0 {
            return Err(Error::Structure(format!("k = {} and f = {} must be >= 1", self.k, self.f)));
        }
        if self.downsample_stages != 2 || self.widths.len() != 2 {
            return Err(Error::Structure(format!(
                "encoder needs exactly 2 stride-2 stages (total stride 4), got {} stages / widths {:?}",
                self.downsample_stages, self.widths
            )));
        }
        if self.widths.contains(&0) || self.expansion == 0 {
            return Err(Error::Structure("encoder widths and expansion must be positive".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.downsample_stages
    }
}

#[derive(Clone, Debug)]
struct InvertedResidual {
    expand: Conv2d,
    depthwise: Conv2d,
    project: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem: Vec<Conv2d>,
    blocks: Vec<InvertedResidual>,
    heatmap: Conv2d,
    features: Conv2d,
}

/// Pre-activation keypoint logits, `(k, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack<T> {
    pub scores: Tensor<T>,
}

/// Per-pixel features, `(f, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    pub features: Tensor<T>,
}

/// Channel 0: row / (h−1), channel 1: column / (w−1), channel 2: constant 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalGrid<T> {
    pub coords: Tensor<T>,
}

impl<T: Scalar> PositionalGrid<T> {
    pub fn height(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[2]
    }
}

pub fn make_positional_grid<T: Scalar>(height: usize, width: usize) -> PositionalGrid<T> {
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let hw = height * width;
    let coords = Tensor::from_fn(&[3, height, width], |idx| {
        let (c, p) = (idx / hw, idx % hw);
        let v = match c {
            0 => norm(p / width, height),
            1 => norm(p % width, width),
            _ => 1.0,
        };
        T::from_f64(v)
    });
    PositionalGrid { coords }
}

impl Encoder {
    pub fn new<T: Scalar>(cfg: &EncoderConfig, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<Self> {
        cfg.validate()?;
        let mut stem = Vec::new();
        let mut cin = 1;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let name = format!("encoder.stem.conv{i}");
            stem.push(Conv2d::new(store, init, &name, cin, w, 3, Conv2dGeom::new(2, 1, 1)));
            cin = w;
        }
        let wide = cin * cfg.expansion;
        let blocks = (0..cfg.residual_blocks)
            .map(|b| InvertedResidual {
                expand: Conv2d::new(store, init, &format!("encoder.block{b}.expand"), cin, wide, 1, Conv2dGeom::default()),
                depthwise: Conv2d::new(
                    store,
                    init,
                    &format!("encoder.block{b}.depthwise"),
                    wide,
                    wide,
                    3,
                    Conv2dGeom::new(1, 1, 1).with_groups(wide),
                ),
                project: Conv2d::new(store, init, &format!("encoder.block{b}.project"), wide, cin, 1, Conv2dGeom::default()),
            })
            .collect();
        let heatmap = Conv2d::new(store, init, "encoder.heatmap", cin, cfg.k, 1, Conv2dGeom::default());
        let features = Conv2d::new(store, init, "encoder.features", cin, cfg.f, 1, Conv2dGeom::default());
        Ok(Encoder { config: cfg.clone(), stem, blocks, heatmap, features })
    }

    /// `x` is `(N, 1, H, W)` with H, W divisible by the encoder stride.
    /// Returns heatmap logits `(N, k, H/4, W/4)` and features `(N, f, H/4, W/4)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        let stride = self.config.stride();
        if s.len() != 4 || s[1] != 1 || !s[2].is_multiple_of(stride) || !s[3].is_multiple_of(stride) {
            return dim_err("encode", format!("input {s:?} must be (N, 1, H, W) with H, W divisible by {stride}"));
        }
        let mut h = x;
        for conv in &self.stem {
            let y = conv.forward(tape, p, h)?;
            h = tape.relu(y);
        }
        for b in &self.blocks {
            let e = b.expand.forward(tape, p, h)?;
            let e = tape.relu(e);
            let d = b.depthwise.forward(tape, p, e)?;
            let d = tape.relu(d);
            let r = b.project.forward(tape, p, d)?;
            h = tape.add(h, r)?;
        }
        let heat = self.heatmap.forward(tape, p, h)?;
        let feat = self.features.forward(tape, p, h)?;
        Ok((heat, feat))
    }

    /// Runs the encoder on one 256×256 map.
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        map: &PressureMap,
    ) -> Result<(HeatmapStack<T>, FeatureGrid<T>, PositionalGrid<T>)> {
        if map.height != INPUT_SIZE || map.width != INPUT_SIZE {
            return dim_err("encode", format!("expected {INPUT_SIZE}x{INPUT_SIZE} map, got {}x{}", map.height, map.width));
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = map.to_unit_tensor::<T>().reshape(&[1, 1, INPUT_SIZE, INPUT_SIZE])?;
        let x = tape.constant(x);
        let (heat, feat) = self.forward(&mut tape, &bound, x)?;
        let g = GRID_SIZE;
        Ok((
            HeatmapStack { scores: tape.value(heat).clone().reshape(&[self.config.k, g, g])? },
            FeatureGrid { features: tape.value(feat).clone().reshape(&[self.config.f, g, g])? },
            make_positional_grid(g, g),
        ))
    }

    pub fn describe(&self, input: usize) -> Vec<LayerDesc> {
        let mut out = Vec::new();
        let mut hw = input;
        for conv in &self.stem {
            out.push(conv.describe(hw));
            hw = conv.out_size(hw);
        }
        for b in &self.blocks {
            out.push(b.expand.describe(hw));
            out.push(b.depthwise.describe(hw));
            out.push(b.project.describe(hw));
        }
        out.push(self.heatmap.describe(hw));
        out.push(self.features.describe(hw));
        out
    }
}
