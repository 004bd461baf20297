//! Encoder → Fuser → Decoder assembly.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::encoder::{make_positional_grid, Encoder, EncoderConfig, PositionalGrid};
use crate::error::{dim_err, Error, Result};
use crate::fuser::{Fuser, FuserVars, HeatmapNorm, KeypointSet};
use crate::opcount::{count_ops, LayerDesc, OpCount};
use crate::params::{Bound, Initializer, ParamStore};
use crate::rebuildnet::{Decoder, DecoderConfig, HeadMode};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub norm: HeatmapNorm,
    pub decoder: DecoderConfig,
    /// Edge length of the (square) input map.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            norm: HeatmapNorm::Sigmoid,
            decoder: DecoderConfig::default(),
            input_size: 256,
        }
    }
}

impl ModelConfig {
    /// Miniature configuration for gradient audits: k = 2, f = 3, 64×64 input,
    /// 16×16 grids, width multiplier 0.125.
    pub fn micro() -> Self {
        ModelConfig {
            encoder: EncoderConfig { k: 2, f: 3, widths: alloc::vec![4, 8], ..Default::default() },
            norm: HeatmapNorm::Sigmoid,
            decoder: DecoderConfig {
                stem_channels: 4,
                width_mult: 0.125,
                base_resolution: 16,
                output_resolution: 16,
                ..Default::default()
            },
            input_size: 64,
        }
    }

    /// Default architecture with the decoder narrowed by `width_mult`.
    pub fn desk(width_mult: f64) -> Self {
        let mut cfg = ModelConfig::default();
        cfg.decoder.width_mult = width_mult;
        cfg
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / self.encoder.stride()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if !self.input_size.is_multiple_of(self.encoder.stride()) {
            return Err(Error::Structure(format!("input size {} not divisible by the encoder stride", self.input_size)));
        }
        if self.grid_size() != self.decoder.base_resolution {
            return Err(Error::Structure(format!(
                "encoder grid {} does not match decoder base resolution {}",
                self.grid_size(),
                self.decoder.base_resolution
            )));
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a digest of the configuration's debug form.
    pub fn hash(&self) -> u64 {
        fnv1a(format!("{self:?}").as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parameters plus the three sub-networks that use them.
#[derive(Clone, Debug)]
pub struct SpmkdModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub fuser: Fuser,
    pub decoder: Decoder,
    grid: PositionalGrid<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub heatmap: Var,
    pub features: Var,
    pub fused: FuserVars,
    pub output: Var,
}

/// Per-module analytic cost.
#[derive(Clone, Debug)]
pub struct ModelOps {
    pub encoder: Vec<LayerDesc>,
    pub fuser: Vec<LayerDesc>,
    pub decoder: Vec<LayerDesc>,
}

impl ModelOps {
    pub fn encoder_count(&self) -> Result<OpCount> {
        count_ops(&self.encoder)
    }
    pub fn fuser_count(&self) -> Result<OpCount> {
        count_ops(&self.fuser)
    }
    pub fn decoder_count(&self) -> Result<OpCount> {
        count_ops(&self.decoder)
    }
    pub fn total(&self) -> Result<OpCount> {
        Ok(self.encoder_count()? + self.fuser_count()? + self.decoder_count()?)
    }
}

impl<T: Scalar> SpmkdModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let e = &config.encoder;
        let encoder = Encoder::new(e, &mut params, &mut init)?;
        let fuser = Fuser::new(e.k, e.f, config.norm, &mut params, &mut init);
        let decoder = Decoder::new(&config.decoder, e.k, e.f, &mut params, &mut init)?;
        let g = config.grid_size();
        Ok(SpmkdModel { config: config.clone(), params, encoder, fuser, decoder, grid: make_positional_grid(g, g) })
    }

    pub fn head_mode(&self) -> HeadMode {
        self.decoder.mode()
    }

    pub fn output_channels(&self) -> usize {
        self.head_mode().channels()
    }

    pub fn output_resolution(&self) -> usize {
        self.config.decoder.output_resolution
    }

    /// `x` is `(N, 1, S, S)` with `S = input_size`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<ForwardVars> {
        let s = tape.shape(x);
        let size = self.config.input_size;
        if s.len() != 4 || s[1..] != [1, size, size] {
            return dim_err("forward", format!("input {s:?}, expected (N, 1, {size}, {size})"));
        }
        let (heatmap, features) = self.encoder.forward(tape, p, x)?;
        let fused = self.fuser.forward(tape, p, heatmap, features, &self.grid)?;
        let output = self.decoder.forward(tape, p, fused.descriptors)?;
        Ok(ForwardVars { heatmap, features, fused, output })
    }

    fn batch_input(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let s = self.config.input_size;
        let x = Tensor::stack(inputs)?;
        x.reshape(&[inputs.len(), 1, s, s])
    }

    /// Forward pass without gradient bookkeeping; returns the decoder output.
    pub fn predict(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(self.batch_input(inputs)?);
        let v = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(v.output).clone())
    }

    /// Keypoint sets for each input map `(1, S, S)`.
    pub fn keypoints(&self, inputs: &[&Tensor<T>]) -> Result<Vec<KeypointSet<T>>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(self.batch_input(inputs)?);
        let (heat, feat) = self.encoder.forward(&mut tape, &p, x)?;
        let v = self.fuser.forward(&mut tape, &p, heat, feat, &self.grid)?;
        let (k, f) = (self.fuser.k, self.fuser.f);
        let split = |t: &Tensor<T>, i: usize, cols: usize| Tensor::new(&[k, cols], t.outer(i).to_vec());
        (0..inputs.len())
            .map(|i| {
                Ok(KeypointSet {
                    positions: split(tape.value(v.positions), i, 3)?,
                    features: split(tape.value(v.features), i, f)?,
                    descriptors: split(tape.value(v.descriptors), i, 2 * f)?,
                })
            })
            .collect()
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.params.bind_frozen(tape)
    }

    pub fn swap_head(&mut self, mode: HeadMode, seed: u64) {
        let mut init = Initializer::new(seed);
        self.decoder.swap_head(&mut self.params, &mut init, mode);
        self.config.decoder.head = mode;
    }

    pub fn describe(&self) -> ModelOps {
        ModelOps {
            encoder: self.encoder.describe(self.config.input_size),
            fuser: self.fuser.describe(),
            decoder: self.decoder.describe(),
        }
    }
}
