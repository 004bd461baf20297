//! Self-supervised pressure-map keypoint discovery.
//!
//! A small reverse-mode autodiff engine drives an encoder that emits keypoint
//! heatmaps and features, a fuser that pools them into keypoint descriptors
//! without any argmax, and a decoder that rebuilds the pressure map from the
//! descriptors alone. Training runs in two phases: pixel presence
//! classification, then regression on a combined L2/SSIM objective starting
//! from the classification weights.
//!
//! The crate is `no_std` (it needs `alloc`); enable `std` for runtime SIMD
//! dispatch in the matrix kernels.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod checkpoint;
pub mod crwt;
pub mod encoder;
pub mod error;
pub mod fuser;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod model;
pub mod opcount;
pub mod optim;
pub mod params;
pub mod probe;
pub mod rebuildnet;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::{Checkpoint, CheckpointEntry, TensorData};
pub use crwt::{run_crwt, train_phase1, train_phase2, transfer_weights, PhaseResult, TrainConfig, TrainingSet};
pub use encoder::{Encoder, EncoderConfig, FeatureGrid, HeatmapStack, PositionalGrid, PressureMap};
pub use error::{Error, Result};
pub use fuser::{Fuser, HeatmapNorm, KeypointSet};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use kernels::Conv2dGeom;
pub use losses::{LossConfig, MetricsRow, Phase, SsimWindow};
pub use model::{ModelConfig, SpmkdModel};
pub use opcount::{count_ops, LayerDesc, OpCount};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamStore, Initializer};
pub use probe::{Posture, ProbeConfig, ProbeModel, ProbeReport};
pub use rebuildnet::{Decoder, DecoderConfig, HeadMode};
pub use tensor::{DType, Scalar, Tensor};
