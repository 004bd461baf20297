use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spmkd::artifacts::read_metrics;
use spmkd::config::ExperimentConfig;
use spmkd::generator::GeneratorConfig;
use spmkd::io::{generate_dataset, Palette};
use spmkd::plot::{plot_curves, Column};
use spmkd::runner;
use spmkd_core::ProbeConfig;

#[derive(Parser)]
#[command(name = "spmkd", version, about = "Self-supervised pressure-map keypoints: data, training and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Dotted-key overrides applied on top of the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, value_name = "N")]
    seed: Option<String>,
    #[arg(long = "phase1.epochs", value_name = "N")]
    phase1_epochs: Option<String>,
    #[arg(long = "phase2.epochs", value_name = "N")]
    phase2_epochs: Option<String>,
    #[arg(long, value_name = "LR")]
    lr: Option<String>,
    #[arg(long, value_name = "A")]
    alpha: Option<String>,
    #[arg(long, value_name = "B")]
    beta: Option<String>,
    #[arg(long = "width_mult", value_name = "M")]
    width_mult: Option<String>,
    #[arg(long, value_name = "K")]
    k: Option<String>,
    #[arg(long, value_name = "F")]
    f: Option<String>,
    #[arg(long = "batch_size", value_name = "N")]
    batch_size: Option<String>,
    #[arg(long, value_name = "sgd|momentum|adam")]
    optimizer: Option<String>,
    #[arg(long, value_name = "desk|micro")]
    preset: Option<String>,
    #[arg(long = "crwt.enabled", value_name = "BOOL")]
    crwt_enabled: Option<String>,
    #[arg(long = "data.path", value_name = "DIR")]
    data_path: Option<String>,
    #[arg(long = "out.dir", value_name = "DIR")]
    out_dir: Option<String>,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    set: Vec<(String, String)>,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_owned(), v.to_owned())).ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

impl Overrides {
    fn pairs(&self) -> Vec<(String, String)> {
        let named = [
            ("seed", &self.seed),
            ("phase1.epochs", &self.phase1_epochs),
            ("phase2.epochs", &self.phase2_epochs),
            ("lr", &self.lr),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("width_mult", &self.width_mult),
            ("k", &self.k),
            ("f", &self.f),
            ("batch_size", &self.batch_size),
            ("optimizer", &self.optimizer),
            ("preset", &self.preset),
            ("crwt.enabled", &self.crwt_enabled),
            ("data.path", &self.data_path),
            ("out.dir", &self.out_dir),
        ];
        let mut out: Vec<(String, String)> =
            named.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_owned(), v.clone()))).collect();
        out.extend(self.set.iter().cloned());
        out
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sensor noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Map edge length in cells.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Use the shifted generator regime (smaller bodies, wider contact).
        #[arg(long)]
        shifted: bool,
    },
    /// Two-phase training; writes checkpoints and metrics CSVs to out.dir.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Train regression from scratch for the same total budget.
        #[arg(long)]
        no_crwt: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fit a linear posture probe on frozen descriptors and append results.
    EvalProbe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        shifted_data: Option<PathBuf>,
        /// Defaults to config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to probe_results.csv next to the checkpoint.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value_t = ProbeConfig::default().iterations)]
        iterations: usize,
    },
    /// Side-by-side original / reconstruction image.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "intensity", value_parser = ["binary", "intensity"])]
        palette: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the fused keypoints as CSV.
        #[arg(long)]
        keypoints: Option<PathBuf>,
    },
    /// Finite-difference gradient audit of the configured model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Entries probed per tensor (0 = all).
        #[arg(long, default_value_t = 8)]
        max_entries: usize,
        /// Only audit tensors whose names start with this; repeatable.
        #[arg(long, value_name = "PREFIX")]
        only: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Per-module parameter and FLOP counts.
    CountOps {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Plot metrics CSVs (one line per file).
    ExportCurves {
        #[arg(long, required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "l2", value_parser = ["l1", "l2", "ssim", "fscore"])]
        column: String,
    },
}

fn run(cmd: Command) -> spmkd::Result<bool> {
    match cmd {
        Command::GenData { out, count, seed, noise, size, shifted } => {
            let base = if shifted { GeneratorConfig::shifted() } else { GeneratorConfig::default() };
            let m = generate_dataset(&out, count, seed, &GeneratorConfig { noise_sigma: noise, ..base.with_size(size) })?;
            println!("wrote {} samples to {} (generator {:016x})", m.count, out.display(), m.generator_hash);
        }
        Command::Train { config, no_crwt, overrides } => {
            let mut kv = overrides.pairs();
            if no_crwt {
                kv.push(("crwt.enabled".into(), "false".into()));
            }
            let cfg = ExperimentConfig::load(config.as_deref(), &kv)?;
            let outcome = runner::train(&cfg)?;
            if let Some((_, p1)) = &outcome.run.phase1 {
                if let Some(r) = p1.rows.last() {
                    println!("phase 1: epoch {} l2 {:.6} fscore {:.4}", r.epoch, r.l2, r.fscore);
                }
            }
            if let Some(r) = outcome.run.phase2.rows.last() {
                println!("phase 2: epoch {} l1 {:.6} l2 {:.6} ssim {:.4}", r.epoch, r.l1, r.l2, r.ssim);
            }
            println!("artifacts in {}", outcome.out_dir.display());
        }
        Command::EvalProbe { ckpt, data, shifted_data, config, results, iterations } => {
            let cfg = runner::config_for_checkpoint(&ckpt, config.as_deref(), &[])?;
            let results = results.unwrap_or_else(|| ckpt.parent().unwrap_or(".".as_ref()).join("probe_results.csv"));
            let probe = ProbeConfig { iterations, ..ProbeConfig::default() };
            for r in runner::eval_probe(&ckpt, &cfg, &data, shifted_data.as_deref(), &results, &probe)? {
                println!("{}", runner::probe_report_line(&r));
            }
            println!("appended to {}", results.display());
        }
        Command::Reconstruct { ckpt, input, out, palette, config, keypoints } => {
            let cfg = runner::config_for_checkpoint(&ckpt, config.as_deref(), &[])?;
            let palette = Palette::parse(&palette).expect("validated by clap");
            runner::reconstruct(&ckpt, &cfg, &input, &out, palette, keypoints.as_deref())?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { config, tolerance, max_entries, only, overrides } => {
            let cfg = ExperimentConfig::load(config.as_deref(), &overrides.pairs())?;
            let limit = (max_entries > 0).then_some(max_entries);
            let prefixes: Vec<&str> = only.iter().map(String::as_str).collect();
            let report = runner::gradcheck(&cfg, tolerance, limit, &prefixes)?;
            for p in &report.params {
                println!(
                    "{:<4} {:<48} max rel err {:.3e}  zero grads {}/{}",
                    if p.passed { "ok" } else { "FAIL" },
                    p.name,
                    p.max_rel_err,
                    p.zero_grads,
                    p.numel
                );
            }
            println!("max rel err {:.3e} (tolerance {tolerance:e})", report.max_rel_err());
            return Ok(report.passed());
        }
        Command::CountOps { config, overrides } => {
            let cfg = ExperimentConfig::load(config.as_deref(), &overrides.pairs())?;
            print!("{}", runner::count_ops(&cfg)?.render());
        }
        Command::ExportCurves { metrics, out, column } => {
            let series = metrics
                .iter()
                .map(|p| Ok((p.display().to_string(), read_metrics(p)?)))
                .collect::<spmkd::Result<Vec<_>>>()?;
            plot_curves(&series, Column::parse(&column).expect("validated by clap"), &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors and 0 for --help / --version
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
