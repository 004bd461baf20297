//! End-to-end commands shared by the CLI and the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};

use spmkd_core::crwt::CrwtRun;
use spmkd_core::gradcheck::{audit_model, jitter_biases};
use spmkd_core::kernels::area_downsample;
use spmkd_core::probe::{evaluate_probe, fit_probe};
use spmkd_core::{
    Checkpoint, GradCheckConfig, GradCheckReport, HeadMode, ModelConfig, OpCount, Phase, Posture, PressureMap,
    ProbeConfig, SpmkdModel, Tensor, TrainingSet,
};

use crate::artifacts::{append_results, load_checkpoint, save_checkpoint, write_keypoints, write_metrics, ProbeResult};
use crate::config::ExperimentConfig;
use crate::error::{Error, IoContext, Result};
use crate::generator::{generate_sample, GeneratorConfig};
use crate::io::{export_side_by_side, load_png16, write_atomic, Dataset, Palette, Panel, Split};

pub const CONFIG_FILE: &str = "config.toml";
pub const PHASE1_CKPT: &str = "phase1.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const PHASE1_METRICS: &str = "metrics_phase1.csv";
pub const PHASE2_METRICS: &str = "metrics_phase2.csv";

pub struct TrainOutcome {
    pub run: CrwtRun<f32>,
    pub out_dir: PathBuf,
    /// Metrics CSVs written, phase 1 first.
    pub metrics: Vec<PathBuf>,
}

/// Trains on the training split of `cfg.data.path`.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = Dataset::open(&cfg.data.path)?;
    let maps: Vec<PressureMap> = data.split(Split::Train).map(|s| s.map.clone()).collect();
    train_on(cfg, &maps)
}

/// Runs the configured protocol on `maps` and writes `config.toml`,
/// checkpoints and metrics under `cfg.out.dir`.
pub fn train_on(cfg: &ExperimentConfig, maps: &[PressureMap]) -> Result<TrainOutcome> {
    let model_cfg = cfg.model_config()?;
    let set = TrainingSet::<f32>::from_maps(maps, &model_cfg)?;
    let run = spmkd_core::run_crwt(&model_cfg, &set, &cfg.train_config())?;
    let out = &cfg.out.dir;
    fs::create_dir_all(out).at(out)?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let mut metrics = Vec::new();
    if let Some((ckpt, res)) = &run.phase1 {
        save_checkpoint(&out.join(PHASE1_CKPT), ckpt)?;
        write_metrics(&out.join(PHASE1_METRICS), &res.rows)?;
        metrics.push(out.join(PHASE1_METRICS));
    }
    save_checkpoint(&out.join(FINAL_CKPT), &run.checkpoint)?;
    write_metrics(&out.join(PHASE2_METRICS), &run.phase2.rows)?;
    metrics.push(out.join(PHASE2_METRICS));
    Ok(TrainOutcome { run, out_dir: out.clone(), metrics })
}

/// The config stored next to a checkpoint unless one is given.
pub fn config_for_checkpoint(ckpt: &Path, explicit: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let default = ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    ExperimentConfig::load(Some(explicit.unwrap_or(&default)), overrides)
}

/// Rebuilds the model a checkpoint was trained as. The configuration must
/// hash to the checkpoint's recorded digest.
pub fn load_model(ckpt: &Checkpoint, cfg: &ExperimentConfig) -> Result<SpmkdModel<f32>> {
    let mut model_cfg = cfg.model_config()?;
    model_cfg.decoder.head = match Phase::parse(&ckpt.phase) {
        Some(Phase::Classification) => HeadMode::Classification,
        Some(Phase::Regression) => HeadMode::Regression,
        None => return Err(Error::Data(format!("checkpoint phase {:?} is unknown", ckpt.phase))),
    };
    let want = cfg.train_config().hash(&model_cfg);
    if want != ckpt.config_hash {
        return Err(Error::Config(format!(
            "checkpoint config hash {:016x} does not match the supplied config ({want:016x})",
            ckpt.config_hash
        )));
    }
    let mut model = SpmkdModel::new(&model_cfg, cfg.seed)?;
    ckpt.load_into(&mut model.params, |_| true)?;
    Ok(model)
}

fn check_size(map: &PressureMap, cfg: &ModelConfig, what: &str) -> Result<()> {
    if map.height != cfg.input_size || map.width != cfg.input_size {
        return Err(Error::Data(format!(
            "{what} is {}x{}, the model expects {}x{}",
            map.height, map.width, cfg.input_size, cfg.input_size
        )));
    }
    Ok(())
}

fn labelled(data: &Dataset, split: Option<Split>, model: &ModelConfig) -> Result<(Vec<Tensor<f32>>, Vec<Posture>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, (s, sp)) in data.samples.iter().zip(&data.manifest.splits).enumerate() {
        if split.is_some_and(|want| want != *sp) {
            continue;
        }
        let pose = s.pose.as_ref().ok_or_else(|| {
            Error::Data(format!("{}: sample {i} has no sidecar, so no posture label", data.root.display()))
        })?;
        check_size(&s.map, model, &format!("sample {i}"))?;
        xs.push(s.map.to_unit_tensor());
        ys.push(pose.posture);
    }
    Ok((xs, ys))
}

/// Fits a probe on the training split, then scores the training split, the
/// held-out split and, optionally, a shifted dataset. Rows are appended to
/// `results`.
pub fn eval_probe(
    ckpt_path: &Path,
    cfg: &ExperimentConfig,
    data_dir: &Path,
    shifted: Option<&Path>,
    results: &Path,
    probe_cfg: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = load_model(&ckpt, cfg)?;
    let data = Dataset::open(data_dir)?;
    let (xs, ys) = labelled(&data, Some(Split::Train), &model.config)?;
    let probe = fit_probe(&model, &xs, &ys, probe_cfg)?;
    let mut rows = vec![ProbeResult::new(ckpt_path, data_dir, "train", &evaluate_probe(&probe, &model, &xs, &ys)?)];
    let (vx, vy) = labelled(&data, Some(Split::Val), &model.config)?;
    if !vx.is_empty() {
        rows.push(ProbeResult::new(ckpt_path, data_dir, "val", &evaluate_probe(&probe, &model, &vx, &vy)?));
    }
    if let Some(dir) = shifted {
        let other = Dataset::open(dir)?;
        let (sx, sy) = labelled(&other, None, &model.config)?;
        rows.push(ProbeResult::new(ckpt_path, dir, "shifted", &evaluate_probe(&probe, &model, &sx, &sy)?));
    }
    append_results(results, &rows)?;
    Ok(rows)
}

/// Reconstruction (or presence probability for a phase-1 checkpoint) at
/// the decoder resolution, with values below the presence threshold zeroed.
pub fn reconstruct_map(model: &SpmkdModel<f32>, map: &PressureMap, threshold: f64) -> Result<PressureMap> {
    check_size(map, &model.config, "input")?;
    let out = model.predict(&[&map.to_unit_tensor()])?;
    let r = model.output_resolution();
    let channel = out.shape()[1] - 1;
    let plane = &out.data()[channel * r * r..(channel + 1) * r * r];
    let values = plane.iter().map(|&v| if (v as f64) > threshold { v } else { 0.0 }).collect();
    Ok(PressureMap::new(r, r, values)?)
}

pub fn reconstruct(
    ckpt_path: &Path,
    cfg: &ExperimentConfig,
    input: &Path,
    out: &Path,
    palette: Palette,
    keypoints: Option<&Path>,
) -> Result<PressureMap> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = load_model(&ckpt, cfg)?;
    let map = load_png16(input)?;
    let rec = reconstruct_map(&model, &map, cfg.train_config().presence_threshold)?;
    export_side_by_side(&[Panel::from(&map), Panel::from(&rec)], out, palette)?;
    if let Some(path) = keypoints {
        write_keypoints(path, &model.keypoints(&[&map.to_unit_tensor()])?)?;
    }
    Ok(rec)
}

/// Finite-difference audit of a 64-bit copy of the configured model
/// (regression head, combined loss) on one synthetic map. Only tensors whose
/// names start with one of `prefixes` are probed; all when empty.
pub fn gradcheck(
    cfg: &ExperimentConfig,
    tolerance: f64,
    max_entries: Option<usize>,
    prefixes: &[&str],
) -> Result<GradCheckReport> {
    let mut model_cfg = cfg.model_config()?;
    model_cfg.decoder.head = HeadMode::Regression;
    let mut model = SpmkdModel::<f64>::new(&model_cfg, cfg.seed)?;
    // move pre-activations off the relu kink so the difference quotient is defined
    jitter_biases(&mut model.params, cfg.seed.wrapping_add(17), 0.1);
    let s = model_cfg.input_size;
    let r = model_cfg.decoder.output_resolution;
    let gen = GeneratorConfig::default().with_size(s);
    let x = generate_sample(cfg.seed, &gen)?.map.to_unit_tensor::<f64>();
    let target = area_downsample(x.data(), 1, s, s, s / r);
    let audit = GradCheckConfig { step: 1e-5, tolerance, floor: 1e-6, max_entries };
    Ok(audit_model(
        &model,
        &x.reshape(&[1, 1, s, s])?,
        &Tensor::new(&[1, 1, r, r], target)?,
        &cfg.train_config().loss,
        prefixes,
        &audit,
    )?)
}

pub struct OpsTable {
    pub encoder: OpCount,
    pub fuser: OpCount,
    pub decoder: OpCount,
}

impl OpsTable {
    pub fn total(&self) -> OpCount {
        self.encoder + self.fuser + self.decoder
    }

    pub fn param_ratio(&self) -> f64 {
        self.encoder.params as f64 / self.decoder.params as f64
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<10} {:>14} {:>16}\n", "module", "params", "flops");
        for (name, c) in [("encoder", self.encoder), ("fuser", self.fuser), ("decoder", self.decoder), ("total", self.total())] {
            s.push_str(&format!("{name:<10} {:>14} {:>16}\n", c.params, c.flops));
        }
        s.push_str(&format!("encoder/decoder params: {:.6}\n", self.param_ratio()));
        s.push_str(&format!("encoder/decoder flops:  {:.6}\n", self.encoder.flops as f64 / self.decoder.flops as f64));
        s
    }
}

/// Static per-module counts of the configured architecture (classification
/// head, as in phase 1).
pub fn count_ops(cfg: &ExperimentConfig) -> Result<OpsTable> {
    let model = SpmkdModel::<f32>::new(&cfg.model_config()?, cfg.seed)?;
    let ops = model.describe();
    Ok(OpsTable { encoder: ops.encoder_count()?, fuser: ops.fuser_count()?, decoder: ops.decoder_count()? })
}

pub fn probe_report_line(r: &ProbeResult) -> String {
    format!("{:<8} n={:<4} accuracy={:.4} confusion=[{}]", r.split, r.n, r.accuracy, r.confusion)
}
