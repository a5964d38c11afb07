//! Loss-trace plots as SVG files.

use std::path::Path;

use plotters::prelude::*;

use super::LossTrace;
use crate::{Error, Result};

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot: {e}"))
}

/// One line per trace column on a log-scaled loss axis. Non-positive values
/// are skipped.
pub fn plot_trace(trace: &LossTrace, path: &Path, title: &str) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::Input("cannot plot an empty trace".into()));
    }
    let positive = || trace.rows.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite() && *v > 0.0);
    let lo = positive().fold(f64::INFINITY, f64::min);
    let hi = positive().fold(0.0, f64::max);
    if !lo.is_finite() {
        return Err(Error::Input("trace has no positive finite values".into()));
    }
    let (first, last) = (trace.rows[0].0, trace.rows[trace.rows.len() - 1].0.max(trace.rows[0].0 + 1));

    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(64)
        .build_cartesian_2d(first as f64..last as f64, (lo * 0.9..hi * 1.1).log_scale())
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("iteration").y_desc("loss").draw().map_err(plot_err)?;
    for (k, name) in trace.columns.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points =
            trace.rows.iter().filter(|(_, v)| v[k].is_finite() && v[k] > 0.0).map(|(it, v)| (*it as f64, v[k]));
        chart
            .draw_series(LineSeries::new(points, &color))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}
