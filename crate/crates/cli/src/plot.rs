//! SVG figures drawn from the arrays stored in a metrics report. Each figure is
//! accompanied by a JSON sidecar holding exactly the plotted arrays.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;
use stun_core::eval::MetricsReport;
use stun_core::io::write_atomic;

use crate::commands::Error;

#[derive(Debug, Serialize)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PALETTE: [RGBColor; 7] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Unit-square line chart with markers; `diagonal` adds the y = x reference.
fn render(fig: &Figure, path: &Path, diagonal: bool) -> Result<(), Error> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(&fig.title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..1.0, 0.0..1.05)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc(fig.x_label.as_str())
            .y_desc(fig.y_label.as_str())
            .draw()
            .map_err(plot_err)?;
        if diagonal {
            chart
                .draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.4)))
                .map_err(plot_err)?
                .label("ideal")
                .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], BLACK.mix(0.4)));
        }
        for (k, s) in fig.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<(f64, f64)> = s.x.iter().copied().zip(s.y.iter().copied()).collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(s.label.as_str())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerRight)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write_atomic(path, svg.as_bytes())?;
    let sidecar = path.with_extension("json");
    write_atomic(
        &sidecar,
        (serde_json::to_string_pretty(fig).map_err(plot_err)? + "\n").as_bytes(),
    )?;
    Ok(())
}

pub fn reliability(report: &MetricsReport) -> Figure {
    Figure {
        title: format!("Reliability diagram: {}", report.method),
        x_label: "confidence (1 - uncertainty level)".into(),
        y_label: "metric within bin".into(),
        series: report
            .reliability
            .iter()
            .map(|r| Series {
                label: r.metric.label(),
                x: r.per_bin.iter().map(|b| b.confidence).collect(),
                y: r.per_bin.iter().map(|b| b.metric).collect(),
            })
            .collect(),
    }
}

pub fn precision_recall(report: &MetricsReport) -> Figure {
    Figure {
        title: format!("Precision-recall: {}", report.method),
        x_label: "recall".into(),
        y_label: "precision".into(),
        series: vec![Series {
            label: format!("AP {:.3}", report.ap),
            x: report.pr_curve.iter().map(|p| p.recall).collect(),
            y: report.pr_curve.iter().map(|p| p.precision).collect(),
        }],
    }
}

pub fn removal(report: &MetricsReport) -> Figure {
    Figure {
        title: format!("Removing uncertain queries: {}", report.method),
        x_label: "fraction of most uncertain queries removed".into(),
        y_label: "top-1 correct ratio".into(),
        series: vec![Series {
            label: report.method.clone(),
            x: report.removal_curve.iter().map(|p| p.fraction).collect(),
            y: report.removal_curve.iter().map(|p| p.top1_ratio).collect(),
        }],
    }
}

/// Writes `reliability.svg`, `pr_curve.svg` and `removal_curve.svg` (each with
/// a `.json` sidecar). Figures whose arrays are empty are skipped.
pub fn render_all(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut written = Vec::new();
    for (name, fig, diagonal) in [
        ("reliability.svg", reliability(report), true),
        ("pr_curve.svg", precision_recall(report), false),
        ("removal_curve.svg", removal(report), false),
    ] {
        if fig.series.iter().all(|s| s.x.is_empty()) {
            log::info!("{}: nothing to draw for {name}", report.method);
            continue;
        }
        let path = dir.join(name);
        render(&fig, &path, diagonal)?;
        written.push(path.with_extension("json"));
        written.push(path);
    }
    Ok(written)
}
