//! Classification-to-regression weight transfer.
//!
//! Phase 1 trains the full network with a two-channel presence head on binary
//! masks (`pressure > 0`). The phase-1 weights, minus the head, then seed a
//! regression model that is trained on the combined L2/SSIM objective.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::encoder::PressureMap;
use crate::error::{Error, Result};
use crate::kernels::area_downsample;
use crate::losses::{
    combined_loss_var, f_score, l1_loss, l2_loss, pixel_cross_entropy_var, presence_mask, ssim, LossConfig,
    MetricsRow, Phase,
};
use crate::model::{fnv1a, ModelConfig, SpmkdModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rebuildnet::{HeadMode, HEAD_PREFIX};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    pub crwt: bool,
    /// Reconstructions above this (unit-normalised) value count as pressure
    /// when scoring phase 2.
    pub presence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            phase1_epochs: 20,
            phase2_epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            loss: LossConfig::default(),
            crwt: true,
            presence_threshold: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: alloc::string::String| Err(Error::Parameter { op: "train", detail });
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.phase2_epochs == 0 || (self.crwt && self.phase1_epochs == 0) {
            return bad(format!("epochs must be >= 1 (phase1 {}, phase2 {})", self.phase1_epochs, self.phase2_epochs));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        self.loss.validate()
    }

    /// Digest of the model and training configuration.
    pub fn hash(&self, model: &ModelConfig) -> u64 {
        fnv1a(format!("{model:?}|{self:?}").as_bytes())
    }
}

/// Inputs, regression targets and presence masks prepared for one model.
#[derive(Clone, Debug)]
pub struct TrainingSet<T> {
    /// `(1, S, S)` unit-normalised maps.
    pub inputs: Vec<Tensor<T>>,
    /// `(1, R, R)` area-averaged targets at the decoder resolution.
    pub targets: Vec<Tensor<T>>,
    /// `R·R` presence masks, `target > 0`.
    pub masks: Vec<Vec<bool>>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn from_maps(maps: &[PressureMap], cfg: &ModelConfig) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::DegenerateData("training set is empty".into()));
        }
        let (s, r) = (cfg.input_size, cfg.decoder.output_resolution);
        if s % r != 0 {
            return Err(Error::Structure(format!("input size {s} is not a multiple of output resolution {r}")));
        }
        let mut set = TrainingSet { inputs: Vec::new(), targets: Vec::new(), masks: Vec::new() };
        for (i, m) in maps.iter().enumerate() {
            if m.height != s || m.width != s {
                return Err(Error::Dimension {
                    op: "training_set",
                    detail: format!("sample {i} is {}x{}, model expects {s}x{s}", m.height, m.width),
                });
            }
            let x = m.to_unit_tensor::<T>();
            let t = area_downsample(x.data(), 1, s, s, s / r);
            set.masks.push(t.iter().map(|&v| v > T::zero()).collect());
            set.targets.push(Tensor::new(&[1, r, r], t)?);
            set.inputs.push(x);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Subset by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        TrainingSet {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Vec<bool>)> {
        let s = self.inputs[0].shape().to_vec();
        let r = self.targets[0].shape().to_vec();
        let b = idx.len();
        let x = Tensor::stack(&idx.iter().map(|&i| &self.inputs[i]).collect::<Vec<_>>())?;
        let t = Tensor::stack(&idx.iter().map(|&i| &self.targets[i]).collect::<Vec<_>>())?;
        let mask = idx.iter().flat_map(|&i| self.masks[i].iter().copied()).collect();
        Ok((x.reshape(&[b, 1, s[1], s[2]])?, t.reshape(&[b, 1, r[1], r[2]])?, mask))
    }
}

/// Metrics and loss trace of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseResult {
    pub rows: Vec<MetricsRow>,
    /// Mean optimised objective per epoch.
    pub losses: Vec<f64>,
    pub steps: u64,
}

impl PhaseResult {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Default)]
struct Running {
    n: f64,
    l1: f64,
    l2: f64,
    ssim: f64,
    fscore: f64,
    loss: f64,
}

impl Running {
    fn add(&mut self, b: usize, l1: f64, l2: f64, ssim: f64, fscore: f64, loss: f64) {
        let w = b as f64;
        self.n += w;
        self.l1 += w * l1;
        self.l2 += w * l2;
        self.ssim += w * ssim;
        self.fscore += w * fscore;
        self.loss += w * loss;
    }

    fn row(&self, epoch: usize, phase: Phase) -> MetricsRow {
        MetricsRow {
            epoch,
            phase,
            l1: self.l1 / self.n,
            l2: self.l2 / self.n,
            ssim: self.ssim / self.n,
            fscore: self.fscore / self.n,
        }
    }
}

/// Scores a batch of decoder outputs against its targets. Classification
/// outputs are scored through the presence-channel probability.
fn score<T: Scalar>(
    out: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
    mode: HeadMode,
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64, f64)> {
    let (pred, pred_mask, reference) = match mode {
        HeadMode::Classification => {
            let s = out.shape();
            let hw = s[2] * s[3];
            let prob: Vec<T> = (0..s[0]).flat_map(|n| out.data()[(2 * n + 1) * hw..(2 * n + 2) * hw].iter().copied()).collect();
            let prob = Tensor::new(&[s[0], 1, s[2], s[3]], prob)?;
            let binary = Tensor::from_fn(target.shape(), |i| if mask[i] { T::one() } else { T::zero() });
            (prob, presence_mask(out), binary)
        }
        HeadMode::Regression => {
            let thr = T::from_f64(cfg.presence_threshold);
            let m = out.data().iter().map(|&v| v > thr).collect();
            (out.clone(), m, target.clone())
        }
    };
    Ok((
        l1_loss(&pred, &reference)?,
        l2_loss(&pred, &reference)?,
        ssim(&pred, &reference, &cfg.loss)?,
        f_score(&pred_mask, mask)?,
    ))
}

type RegressionLoss<'a, T> = dyn FnMut(&mut Tape<T>, Var, Var) -> Result<Var> + 'a;

fn epoch_order(n: usize, seed: u64, phase: Phase, epoch: usize) -> Vec<usize> {
    let mut key = Vec::with_capacity(24);
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(phase.as_str().as_bytes());
    key.extend_from_slice(&(epoch as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&key));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn train_loop<T: Scalar>(
    model: &mut SpmkdModel<T>,
    set: &TrainingSet<T>,
    cfg: &TrainConfig,
    epochs: usize,
    mut regression: Option<&mut RegressionLoss<'_, T>>,
) -> Result<PhaseResult> {
    if set.is_empty() {
        return Err(Error::DegenerateData("training set is empty".into()));
    }
    let mode = model.head_mode();
    let phase = match mode {
        HeadMode::Classification => Phase::Classification,
        HeadMode::Regression => Phase::Regression,
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut result = PhaseResult { rows: Vec::with_capacity(epochs), losses: Vec::with_capacity(epochs), steps: 0 };
    for epoch in 1..=epochs {
        let order = epoch_order(set.len(), cfg.seed, phase, epoch);
        let mut acc = Running::default();
        for idx in order.chunks(cfg.batch_size) {
            let (x, target, mask) = set.batch(idx)?;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let xv = tape.constant(x);
            let fv = model.forward(&mut tape, &bound, xv)?;
            let loss = match (mode, regression.as_deref_mut()) {
                (HeadMode::Classification, _) => pixel_cross_entropy_var(&mut tape, fv.output, &mask)?,
                (HeadMode::Regression, Some(f)) => {
                    let t = tape.constant(target.clone());
                    f(&mut tape, fv.output, t)?
                }
                (HeadMode::Regression, None) => {
                    let t = tape.constant(target.clone());
                    combined_loss_var(&mut tape, fv.output, t, &cfg.loss)?
                }
            };
            let lv = tape.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Divergence { phase: phase.as_str(), epoch, loss: lv });
            }
            let (l1, l2, s, fs) = score(tape.value(fv.output), &target, &mask, mode, cfg)?;
            acc.add(idx.len(), l1, l2, s, fs, lv);
            let mut grads = tape.backward(loss)?;
            model.params.collect_grads(&bound, &mut grads);
            opt.step(&mut model.params);
            result.steps += 1;
        }
        result.rows.push(acc.row(epoch, phase));
        result.losses.push(acc.loss / acc.n);
    }
    Ok(result)
}

/// Phase 1: pixel-wise presence classification.
pub fn train_phase1<T: Scalar>(
    model: &mut SpmkdModel<T>,
    set: &TrainingSet<T>,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, PhaseResult)> {
    if model.head_mode() != HeadMode::Classification {
        return Err(Error::Contract("phase 1 needs a classification head".into()));
    }
    let result = train_loop(model, set, cfg, cfg.phase1_epochs, None)?;
    let hash = cfg.hash(&model.config);
    Ok((Checkpoint::from_store(&model.params, Phase::Classification.as_str(), cfg.phase1_epochs as u64, hash), result))
}

/// Loads every non-head tensor of `ckpt` into `model` and gives it a freshly
/// initialised regression head. On error the model is left unchanged.
pub fn transfer_weights<T: Scalar>(ckpt: &Checkpoint, model: &mut SpmkdModel<T>, seed: u64) -> Result<()> {
    let backbone = |n: &str| !n.starts_with(HEAD_PREFIX);
    let mut staged = model.params.clone();
    ckpt.load_into(&mut staged, backbone)?;
    model.params = staged;
    model.swap_head(HeadMode::Regression, seed);
    Ok(())
}

/// Phase 2: reconstruction on the combined objective.
pub fn train_phase2<T: Scalar>(
    model: &mut SpmkdModel<T>,
    set: &TrainingSet<T>,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, PhaseResult)> {
    let epochs = cfg.phase2_epochs;
    let result = fit_regression(model, set, cfg, epochs, &mut |t, p, y| combined_loss_var(t, p, y, &cfg.loss))?;
    let hash = cfg.hash(&model.config);
    Ok((Checkpoint::from_store(&model.params, Phase::Regression.as_str(), epochs as u64, hash), result))
}

/// Regression training with a caller-supplied objective `(tape, pred, target)`.
pub fn fit_regression<T: Scalar>(
    model: &mut SpmkdModel<T>,
    set: &TrainingSet<T>,
    cfg: &TrainConfig,
    epochs: usize,
    loss: &mut RegressionLoss<'_, T>,
) -> Result<PhaseResult> {
    if model.head_mode() != HeadMode::Regression {
        return Err(Error::Contract("regression training needs a regression head".into()));
    }
    train_loop(model, set, cfg, epochs, Some(loss))
}

/// Metrics of the current model over a whole set, without updating it.
pub fn evaluate<T: Scalar>(model: &SpmkdModel<T>, set: &TrainingSet<T>, cfg: &TrainConfig, epoch: usize) -> Result<MetricsRow> {
    let mode = model.head_mode();
    let phase = match mode {
        HeadMode::Classification => Phase::Classification,
        HeadMode::Regression => Phase::Regression,
    };
    let mut acc = Running::default();
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(cfg.batch_size.max(1)) {
        let (x, target, mask) = set.batch(idx)?;
        let inputs: Vec<Tensor<T>> = (0..idx.len()).map(|i| Tensor::new(&x.shape()[1..], x.outer(i).to_vec())).collect::<Result<_>>()?;
        let out = model.predict(&inputs.iter().collect::<Vec<_>>())?;
        let (l1, l2, s, fs) = score(&out, &target, &mask, mode, cfg)?;
        acc.add(idx.len(), l1, l2, s, fs, 0.0);
    }
    Ok(acc.row(epoch, phase))
}

/// Outcome of [`run_crwt`].
#[derive(Clone, Debug)]
pub struct CrwtRun<T> {
    pub model: SpmkdModel<T>,
    /// Present only when transfer is enabled.
    pub phase1: Option<(Checkpoint, PhaseResult)>,
    pub phase2: PhaseResult,
    pub checkpoint: Checkpoint,
}

/// Phase 1 → transfer → phase 2. With transfer disabled a freshly
/// initialised regression model trains for `phase1 + phase2` epochs so both
/// arms see the same budget.
pub fn run_crwt<T: Scalar>(model_cfg: &ModelConfig, set: &TrainingSet<T>, cfg: &TrainConfig) -> Result<CrwtRun<T>> {
    cfg.validate()?;
    let head_seed = cfg.seed.wrapping_add(1);
    if cfg.crwt {
        let mut c = model_cfg.clone();
        c.decoder.head = HeadMode::Classification;
        let mut model = SpmkdModel::new(&c, cfg.seed)?;
        let (ckpt1, res1) = train_phase1(&mut model, set, cfg)?;
        transfer_weights(&ckpt1, &mut model, head_seed)?;
        let (ckpt2, res2) = train_phase2(&mut model, set, cfg)?;
        Ok(CrwtRun { model, phase1: Some((ckpt1, res1)), phase2: res2, checkpoint: ckpt2 })
    } else {
        let mut c = model_cfg.clone();
        c.decoder.head = HeadMode::Regression;
        let mut model = SpmkdModel::new(&c, cfg.seed)?;
        let budget = TrainConfig { phase2_epochs: cfg.phase1_epochs + cfg.phase2_epochs, ..cfg.clone() };
        let (mut ckpt, res) = train_phase2(&mut model, set, &budget)?;
        // identify the run by the caller's configuration, not the internal budget
        ckpt.config_hash = cfg.hash(&model.config);
        Ok(CrwtRun { model, phase1: None, phase2: res, checkpoint: ckpt })
    }
}
