//! SVG figures for the volume sweep and precision-recall curves.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{config, Error, Result};
use crate::eval::EvalReport;
use crate::experiment::VolumeReport;

fn draw_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Numeric(format!("plot: {e}"))
}

fn ensure_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Mean R4 AUPRC against synthetic volume, one line per target domain.
pub fn volume_plot(report: &VolumeReport, path: &Path) -> Result<()> {
    if report.series.is_empty() {
        return Err(config("volume report has no series"));
    }
    ensure_dir(path)?;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let values = report.series.iter().flat_map(|s| s.points.iter().map(|p| 100.0 * p.mean));
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo > hi { (0.0, 100.0) } else { ((lo - 5.0).max(0.0), (hi + 5.0).min(100.0)) };
    let mut chart = ChartBuilder::on(&root)
        .caption("R4 AUPRC by synthetic volume", ("sans-serif", 20))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..105.0, lo..hi)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("synthetic pairs (% of target pre-images)")
        .y_desc("AUPRC x100")
        .draw()
        .map_err(draw_err)?;
    for (i, s) in report.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = s.points.iter().map(|p| (100.0 * p.fraction, 100.0 * p.mean)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(s.target.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled()))).map_err(draw_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Step-wise precision-recall curves, one per report.
pub fn pr_plot(reports: &[(String, EvalReport)], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(config("no evaluation reports to plot"));
    }
    ensure_dir(path)?;
    let root = SVGBackend::new(path, (600, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Precision-recall", ("sans-serif", 20))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..1.0, 0.0..1.02)
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("recall").y_desc("precision").draw().map_err(draw_err)?;
    for (i, (name, r)) in reports.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let mut pts = Vec::with_capacity(2 * r.pr_points.len() + 1);
        let mut prev = 0.0;
        for p in &r.pr_points {
            pts.push((prev, p.precision));
            pts.push((p.recall, p.precision));
            prev = p.recall;
        }
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(draw_err)?
            .label(format!("{name} (AP {:.3})", r.auprc))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerLeft)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}
