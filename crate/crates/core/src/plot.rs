//! Static SVG figures.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{arg_err, Error, Result};
use crate::evaluation::{EvalReport, SweepTable};
use crate::rates::RateRow;
use crate::training::EpochRecord;

fn draw_err<E: std::fmt::Display>(e: E) -> Error {
    Error::InvalidArgument(format!("plot: {e}"))
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn bounds(values: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-6);
    (lo - pad * span, hi + pad * span)
}

struct Series {
    label: String,
    points: Vec<(f64, f64, f64)>,
}

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return arg_err("nothing to plot");
    }
    let xs = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), 0.05);
    let ys = bounds(series.iter().flat_map(|s| s.points.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2])), 0.1);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(xs.0..xs.1, ys.0..ys.1)
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(draw_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s.points.iter().map(|p| (p.0, p.1)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(draw_err)?;
        let bars = s.points.iter().filter(|p| p.2 > 0.0).map(|&(x, y, e)| PathElement::new(vec![(x, y - e), (x, y + e)], color));
        chart.draw_series(bars).map_err(draw_err)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// PSNR against `c_rd` with one line per `c_sr`, CI bars included.
pub fn psnr_grid(path: &Path, title: &str, reports: &[EvalReport]) -> Result<()> {
    let mut series: Vec<Series> = Vec::new();
    for r in reports {
        let label = format!("c_sr = {:.2} dB", r.link.c_sr_db);
        let point = (r.link.c_rd_db, r.psnr_mean, r.psnr_ci95);
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push(point),
            None => series.push(Series { label, points: vec![point] }),
        }
    }
    line_chart(path, title, "c_rd (dB)", "PSNR (dB)", &series)
}

/// PSNR with CI bars against the swept parameter.
pub fn sweep(path: &Path, title: &str, table: &SweepTable) -> Result<()> {
    let points = table.rows.iter().map(|r| (r.value, r.report.psnr_mean, r.report.psnr_ci95)).collect();
    line_chart(path, title, &table.parameter, "PSNR (dB)", &[Series { label: "PSNR".into(), points }])
}

/// Training and validation loss per epoch.
pub fn training_curves(path: &Path, title: &str, history: &[EpochRecord]) -> Result<()> {
    let train = history.iter().map(|h| (h.epoch as f64, h.train_loss, 0.0)).collect();
    let val = history.iter().map(|h| (h.epoch as f64, h.val_loss, 0.0)).collect();
    line_chart(
        path,
        title,
        "epoch",
        "MSE",
        &[Series { label: "train".into(), points: train }, Series { label: "validation".into(), points: val }],
    )
}

/// Optimal rate against `c_rd`, one line per `c_sr`.
pub fn rates(path: &Path, title: &str, rows: &[RateRow]) -> Result<()> {
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let label = format!("c_sr = {:.2} dB", crate::channel::gain_to_db(r.link.c_sr));
        let point = (crate::channel::gain_to_db(r.link.c_rd), r.result.r_star, 0.0);
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push(point),
            None => series.push(Series { label, points: vec![point] }),
        }
    }
    line_chart(path, title, "c_rd (dB)", "R* (bits / real use)", &series)
}
