//! Checkpoint files and CSV outputs.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spmkd_core::{Checkpoint, KeypointSet, MetricsRow, Phase, ProbeReport, Scalar};

use crate::error::{Error, IoContext, Result};
use crate::io::write_atomic;

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).at(path)?;
    Checkpoint::decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// `epoch,phase,l1,l2,ssim,fscore`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: String,
    pub l1: f64,
    pub l2: f64,
    pub ssim: f64,
    pub fscore: f64,
}

impl From<&MetricsRow> for MetricsRecord {
    fn from(r: &MetricsRow) -> Self {
        MetricsRecord { epoch: r.epoch, phase: r.phase.as_str().into(), l1: r.l1, l2: r.l2, ssim: r.ssim, fscore: r.fscore }
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv { path: path.to_owned(), source }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["epoch", "phase", "l1", "l2", "ssim", "fscore"]).map_err(csv_err(path))?;
    }
    for r in rows {
        w.serialize(MetricsRecord::from(r)).map_err(csv_err(path))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let rows: Vec<MetricsRecord> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err(path))?;
    if let Some(bad) = rows.iter().find(|r| Phase::parse(&r.phase).is_none()) {
        return Err(Error::Data(format!("{}: unknown phase {:?}", path.display(), bad.phase)));
    }
    Ok(rows)
}

/// One line of the probe results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub checkpoint: String,
    pub dataset: String,
    pub split: String,
    pub n: usize,
    pub accuracy: f64,
    /// `confusion[true][pred]`, row-major, space separated.
    pub confusion: String,
}

impl ProbeResult {
    pub fn new(checkpoint: &Path, dataset: &Path, split: &str, report: &ProbeReport) -> Self {
        let n = report.confusion.iter().flatten().sum();
        let confusion = report.confusion.iter().flatten().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        ProbeResult {
            checkpoint: checkpoint.display().to_string(),
            dataset: dataset.display().to_string(),
            split: split.to_owned(),
            n,
            accuracy: report.accuracy,
            confusion,
        }
    }
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_results(path: &Path, rows: &[ProbeResult]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().at(path)
}

/// One row per keypoint: `sample,keypoint,y,x,d0..d{2f-1}` (normalised grid
/// coordinates, row first).
pub fn write_keypoints<T: Scalar>(path: &Path, sets: &[KeypointSet<T>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = sets.first().map(|s| s.descriptors.shape()[1]).unwrap_or(0);
    let mut header = vec!["sample".to_owned(), "keypoint".into(), "y".into(), "x".into()];
    header.extend((0..d).map(|i| format!("d{i}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for (s, set) in sets.iter().enumerate() {
        let pos = set.positions.to_f64_vec();
        let desc = set.descriptors.to_f64_vec();
        for kp in 0..set.k() {
            let mut rec = vec![s.to_string(), kp.to_string(), pos[kp * 3].to_string(), pos[kp * 3 + 1].to_string()];
            rec.extend(desc[kp * d..(kp + 1) * d].iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err(path))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, &bytes)
}
