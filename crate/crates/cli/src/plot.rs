//! SVG line and scatter plots of result tables. Plots are derived
//! artifacts: the CSV they are drawn from is never touched.

use std::path::Path;

use persidskii::pmsm::Table;
use plotters::prelude::*;

use crate::error::{CliError, Result};
use crate::formats::read_table_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Line,
    Scatter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x: String,
    pub ys: Vec<String>,
    /// One series per distinct value of this column (used with a single `y`).
    pub group_by: Option<String>,
    pub kind: PlotKind,
}

impl PlotSpec {
    pub fn line(title: &str, x: &str, ys: &[&str]) -> Self {
        PlotSpec { title: title.into(), x: x.into(), ys: ys.iter().map(|s| s.to_string()).collect(), group_by: None, kind: PlotKind::Line }
    }
}

type SeriesData = Vec<(String, Vec<(f64, f64)>)>;

fn series(table: &Table, spec: &PlotSpec) -> Result<SeriesData> {
    if table.rows.is_empty() {
        return Err(CliError::PlotSpec(format!("table {} is empty", table.name)));
    }
    let col = |c: &str| table.column(c).map_err(|_| CliError::PlotSpec(format!("table {} has no column {c}", table.name)));
    let x = col(&spec.x)?;
    let finite = |pts: Vec<(f64, f64)>| pts.into_iter().filter(|(a, b)| a.is_finite() && b.is_finite()).collect::<Vec<_>>();
    let mut out = Vec::new();
    match &spec.group_by {
        Some(g) => {
            let groups = col(g)?;
            let y = col(spec.ys.first().ok_or_else(|| CliError::PlotSpec("no y column".into()))?)?;
            let mut keys: Vec<f64> = Vec::new();
            for k in &groups {
                if !keys.contains(k) {
                    keys.push(*k);
                }
            }
            for k in keys {
                let pts = (0..x.len()).filter(|&i| groups[i] == k).map(|i| (x[i], y[i])).collect();
                out.push((format!("{g} = {k}"), finite(pts)));
            }
        }
        None => {
            for name in &spec.ys {
                let y = col(name)?;
                out.push((name.clone(), finite(x.iter().copied().zip(y).collect())));
            }
        }
    }
    Ok(out)
}

fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

/// Draws `spec` from `table` into an SVG file at `out`.
pub fn emit_plot(table: &Table, spec: &PlotSpec, out: &Path) -> Result<()> {
    let data = series(table, spec)?;
    let (x0, x1) = range(data.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = range(data.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(out, (800, 500)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(&spec.title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(64)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc(spec.x.as_str()).draw()?;
        for (i, (label, pts)) in data.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            match spec.kind {
                PlotKind::Line => {
                    chart
                        .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
                        .label(label.as_str())
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
                }
                PlotKind::Scatter => {
                    chart
                        .draw_series(pts.iter().map(|p| Circle::new(*p, 3, color.filled())))?
                        .label(label.as_str())
                        .legend(move |(x, y)| Circle::new((x + 9, y), 3, color.filled()));
                }
            }
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| CliError::Format(format!("plot {}: {e}", out.display())))
}

/// As [`emit_plot`], reading the table from a CSV file.
pub fn emit_plot_csv(csv: &Path, spec: &PlotSpec, out: &Path) -> Result<()> {
    let name = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    emit_plot(&read_table_csv(csv, name)?, spec, out)
}
