//! Loss-curve line plots.

use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;

use crate::artifacts::MetricsRecord;
use crate::error::{Error, Result};

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers the first readable system font; `false` when none exists and
/// plots are drawn without text.
fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let env = std::env::var("SPMKD_FONT").ok();
        for path in env.iter().map(String::as_str).chain(FONT_CANDIDATES) {
            if let Ok(bytes) = std::fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    L1,
    L2,
    Ssim,
    Fscore,
}

impl Column {
    pub fn parse(s: &str) -> Option<Column> {
        match s {
            "l1" => Some(Column::L1),
            "l2" => Some(Column::L2),
            "ssim" => Some(Column::Ssim),
            "fscore" => Some(Column::Fscore),
            _ => None,
        }
    }

    fn get(self, r: &MetricsRecord) -> f64 {
        match self {
            Column::L1 => r.l1,
            Column::L2 => r.l2,
            Column::Ssim => r.ssim,
            Column::Fscore => r.fscore,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Column::L1 => "l1",
            Column::L2 => "l2",
            Column::Ssim => "ssim",
            Column::Fscore => "fscore",
        }
    }
}

fn perr<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// One line per `(label, rows)` series; x is the running row index so
/// consecutive phases in one file line up end to end.
pub fn plot_curves(series: &[(String, Vec<MetricsRecord>)], column: Column, out: &Path) -> Result<()> {
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(_, rows)| rows.iter().enumerate().map(|(i, r)| ((i + 1) as f64, column.get(r))).filter(|p| p.1.is_finite()).collect())
        .collect();
    let all = pts.iter().flatten();
    let (mut lo, mut hi) = all.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if !lo.is_finite() {
        return Err(Error::Plot("no finite points to plot".into()));
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = (hi - lo) * 0.05;
    let xmax = all.map(|p| p.0).fold(1.0, f64::max);

    let text = font_available();
    let root = BitMapBackend::new(out, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let mut b = ChartBuilder::on(&root);
    b.margin(15);
    if text {
        b.caption(format!("{} per epoch", column.name()), ("sans-serif", 22)).x_label_area_size(40).y_label_area_size(70);
    }
    let mut chart = b.build_cartesian_2d(0.0..xmax + 1.0, (lo - pad)..(hi + pad)).map_err(perr)?;
    if text {
        chart.configure_mesh().x_desc("epoch").y_desc(column.name()).draw().map_err(perr)?;
    }
    for (i, ((label, _), p)) in series.iter().zip(&pts).enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let s = chart.draw_series(LineSeries::new(p.iter().copied(), color.stroke_width(2))).map_err(perr)?;
        if text {
            s.label(label.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    if text && series.len() > 1 {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(perr)?;
    }
    root.present().map_err(perr)?;
    Ok(())
}
