//! SVG line plots rendered from the CSV artifacts of other commands.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde_json::json;

use cryodiff::metrics::FSC_THRESHOLD;

use crate::run::{usage, CliError, CliResult, RunDir};
use crate::PlotArgs;

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn parse_spec(spec: &str) -> (PathBuf, String) {
    match spec.split_once('=') {
        Some((p, l)) => (PathBuf::from(p), l.to_string()),
        None => {
            let p = PathBuf::from(spec);
            let label = p
                .parent()
                .and_then(|d| d.file_name())
                .or_else(|| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (p, label)
        }
    }
}

/// Reads columns `x` and `y` (by header name) from a CSV file.
fn read_columns(path: &Path, x: &str, y: &str) -> CliResult<Vec<(f64, f64)>> {
    let err = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(err)?;
    let headers = reader.headers().map_err(err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("{} has no column {name:?}", path.display())))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(err)?;
        let parse = |i: usize| -> CliResult<f64> {
            record[i].parse().map_err(|_| {
                CliError::Usage(format!("{}: bad number {:?}", path.display(), &record[i]))
            })
        };
        points.push((parse(xi)?, parse(yi)?));
    }
    Ok(points)
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| if hi > lo { (hi - lo) * 0.05 } else { 0.5 };
    let (px, py) = (pad(x0, x1), pad(y0, y1));
    (x0, x1 + if x1 > x0 { 0.0 } else { px }, y0 - py, y1 + py)
}

fn draw_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn render(
    path: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[Series],
    y_range: Option<(f64, f64)>,
    threshold: Option<f64>,
) -> CliResult<()> {
    let (x0, x1, mut y0, mut y1) = bounds(series);
    if let Some((lo, hi)) = y_range {
        y0 = lo;
        y1 = hi;
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_error(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| draw_error(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(|e| draw_error(path, e))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                s.points
                    .iter()
                    .copied()
                    .filter(|(x, y)| x.is_finite() && y.is_finite()),
                color.stroke_width(2),
            ))
            .map_err(|e| draw_error(path, e))?
            .label(s.label.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2))
            });
    }
    if let Some(t) = threshold {
        chart
            .draw_series(DashedLineSeries::new(
                vec![(x0, t), (x1, t)],
                8,
                5,
                BLACK.stroke_width(1),
            ))
            .map_err(|e| draw_error(path, e))?
            .label(format!("FSC = {t}"))
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK.stroke_width(1)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_error(path, e))?;
    root.present().map_err(|e| draw_error(path, e))
}

pub fn plot(args: PlotArgs) -> CliResult<()> {
    if args.fsc.is_empty() && args.loss.is_empty() {
        return usage("nothing to plot: pass --fsc and/or --loss CSV files");
    }
    let mut run = RunDir::create(&args.out, "plot")?;
    run.config(json!({ "fsc": args.fsc, "loss": args.loss }));
    if !args.fsc.is_empty() {
        let mut series = Vec::new();
        for spec in &args.fsc {
            let (path, label) = parse_spec(spec);
            run.input(&path);
            series.push(Series {
                label,
                points: read_columns(&path, "shell_freq_invA", "fsc")?,
            });
        }
        let out = run.output("fsc.svg");
        render(
            &out,
            "Fourier shell correlation",
            "spatial frequency (1/Å)",
            "FSC",
            &series,
            Some((-0.2, 1.05)),
            Some(FSC_THRESHOLD),
        )?;
    }
    if !args.loss.is_empty() {
        let mut series = Vec::new();
        for spec in &args.loss {
            let (path, label) = parse_spec(spec);
            run.input(&path);
            series.push(Series {
                label,
                points: read_columns(&path, "step", "loss")?,
            });
        }
        let out = run.output("loss.svg");
        render(&out, "Training loss", "step", "loss", &series, None, None)?;
    }
    run.finish()
}
