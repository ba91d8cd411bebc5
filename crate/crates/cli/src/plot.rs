//! Static SVG charts. Output bytes depend only on the inputs.

use std::path::Path;

use mtid_core::metrics::PlanEvalReport;
use mtid_core::{Error, Result};
use plotters::prelude::*;

pub const METRICS_SVG: &str = "metrics.svg";
pub const CURVES_SVG: &str = "curves.svg";

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn draw_err<E: std::error::Error + Send + Sync>(e: DrawingAreaErrorKind<E>) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Grouped bars: one group per report, bars for SR, mAcc and mIoU.
pub fn metric_bars(reports: &[PlanEvalReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::config("no reports to plot"));
    }
    let n = reports.len();
    let width = (160 + 90 * n).max(480) as u32;
    let root = SVGBackend::new(path, (width, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let labels: Vec<String> = reports.iter().map(|r| r.label.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption("Plan metrics", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(60)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..n as f64, 0f64..1.05f64)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n + 1)
        .x_label_formatter(&|x| {
            let i = (*x - 0.5).round();
            if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                labels[i as usize].clone()
            } else {
                String::new()
            }
        })
        .y_desc("score")
        .draw()
        .map_err(draw_err)?;

    let metrics: [(&str, fn(&PlanEvalReport) -> f64); 3] = [("SR", |r| r.sr), ("mAcc", |r| r.macc), ("mIoU", |r| r.miou)];
    let bar = 0.8 / metrics.len() as f64;
    for (k, (name, value)) in metrics.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(reports.iter().enumerate().map(|(i, r)| {
                let x0 = i as f64 + 0.1 + k as f64 * bar;
                Rectangle::new([(x0, 0.0), (x0 + bar * 0.9, value(r))], color.filled())
            }))
            .map_err(draw_err)?
            .label(*name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// A named `(x, y)` series read from a curve file.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads a CSV curve: the first column is x; y is the `loss` or
/// `train_loss` column, or the last column if neither exists.
pub fn read_curve(path: &Path) -> Result<Curve> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    let headers = r.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if headers.len() < 2 {
        return Err(malformed("curve needs at least two columns".into()));
    }
    let y_col = headers
        .iter()
        .position(|h| h == "loss" || h == "train_loss")
        .unwrap_or(headers.len() - 1);
    let mut points = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| malformed(e.to_string()))?;
        let num = |i: usize| row[i].parse::<f64>().map_err(|_| malformed(format!("bad number {:?}", &row[i])));
        points.push((num(0)?, num(y_col)?));
    }
    if points.is_empty() {
        return Err(malformed("curve has no rows".into()));
    }
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|d| format!("{}/{}", d.to_string_lossy(), path.file_name().unwrap_or_default().to_string_lossy()))
        .unwrap_or_else(|| path.display().to_string());
    Ok(Curve { name, points })
}

pub fn curve_lines(curves: &[Curve], path: &Path) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::config("no curves to plot"));
    }
    let all = curves.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training curves", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(draw_err)?;
    chart.configure_mesh().draw().map_err(draw_err)?;
    for (k, c) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(c.points.iter().copied(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(c.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}
