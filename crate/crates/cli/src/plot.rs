//! Static SVG figures: AP against training step from `eval.jsonl` logs, or
//! AP against a swept value from `sweep.csv` tables. Several inputs are
//! averaged point by point and drawn with a ±1 standard deviation band.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use plotters::prelude::*;
use polite_teacher::ssl::{EvalPoint, Stage};

use crate::{CliError, CliResult};

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mask,
    Box,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageFilter {
    Burnin,
    Mutual,
}

#[derive(Args, Debug, Clone)]
pub struct PlotArgs {
    /// eval.jsonl logs or sweep.csv tables (all of one kind).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output SVG; the aggregated points go to the same path with a .csv extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Metric::Mask)]
    pub metric: Metric,
    /// Plot one stage of an eval log on its own step axis. By default mutual
    /// steps continue after the last burn-in step.
    #[arg(long, value_enum)]
    pub stage: Option<StageFilter>,
}

/// Mean of one x position over the runs, with the sample standard deviation
/// when there is more than one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Point {
    pub fn single(x: f64, y: f64) -> Self {
        Self { x, mean: y, std: None, n: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<Point>,
}

/// Reads `(step, AP)` pairs from an eval log.
pub fn read_eval_log(path: &Path, metric: Metric, stage: Option<StageFilter>) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: EvalPoint = serde_json::from_str(line)
            .map_err(|e| anyhow!("parse error in {} at line {}: {e}", path.display(), i + 1))?;
        points.push(p);
    }
    if points.is_empty() {
        bail!("{} holds no evaluations", path.display());
    }
    let burn_end = points
        .iter()
        .filter(|p| p.stage == Stage::Burnin)
        .map(|p| p.step)
        .max()
        .unwrap_or(0);
    let keep = |p: &EvalPoint| match stage {
        None => true,
        Some(StageFilter::Burnin) => p.stage == Stage::Burnin,
        Some(StageFilter::Mutual) => p.stage == Stage::Mutual,
    };
    let out: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| keep(p))
        .map(|p| {
            let offset = if stage.is_none() && p.stage == Stage::Mutual { burn_end } else { 0 };
            let y = match metric {
                Metric::Mask => p.map_mask,
                Metric::Box => p.map_box,
            };
            ((p.step + offset) as f64, y)
        })
        .collect();
    if out.is_empty() {
        bail!("{} holds no evaluations of the requested stage", path.display());
    }
    Ok(out)
}

/// Reads `(value, AP)` pairs from a sweep table.
pub fn read_sweep_table(path: &Path, metric: Metric) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers().with_context(|| format!("parse error in {} at line 1", path.display()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("parse error in {} at line 1: missing column `{name}`", path.display()))
    };
    let xi = col("value")?;
    let yi = col(match metric {
        Metric::Mask => "mask_ap",
        Metric::Box => "box_ap",
    })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow!("parse error in {} at line {line}: {e}", path.display())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.trim()
                .parse()
                .map_err(|_| anyhow!("parse error in {} at line {line}: `{s}` is not a number", path.display()))
        };
        out.push((num(xi)?, num(yi)?));
    }
    if out.is_empty() {
        bail!("{} holds no rows", path.display());
    }
    Ok(out)
}

/// Point-wise mean and sample standard deviation over runs, at the x
/// positions every run shares. Repeated x positions within one run are
/// averaged first.
pub fn aggregate(runs: &[Vec<(f64, f64)>]) -> Vec<Point> {
    let Some(first) = runs.first() else { return Vec::new() };
    let mut xs: Vec<f64> = first.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let at = |run: &[(f64, f64)], x: f64| -> Option<f64> {
        let ys: Vec<f64> = run.iter().filter(|p| p.0 == x).map(|p| p.1).collect();
        (!ys.is_empty()).then(|| ys.iter().sum::<f64>() / ys.len() as f64)
    };
    xs.into_iter()
        .filter_map(|x| {
            let ys: Option<Vec<f64>> = runs.iter().map(|r| at(r, x)).collect();
            let ys = ys?;
            let n = ys.len();
            let mean = ys.iter().sum::<f64>() / n as f64;
            let std = (n > 1).then(|| {
                (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            });
            Some(Point { x, mean, std, n })
        })
        .collect()
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    let pad = if span > 0.0 { 0.05 * span } else { 0.05 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

/// Draws each series as a line with markers and, where present, a shaded
/// band of one standard deviation.
pub fn draw(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<()> {
    let all: Vec<&Point> = series.iter().flat_map(|s| &s.points).collect();
    if all.is_empty() {
        bail!("nothing to plot");
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, v: &dyn Fn(&Point) -> f64| {
        all.iter().map(|p| v(p)).fold(init, f)
    };
    let (x0, x1) = padded(fold(f64::min, f64::INFINITY, &|p| p.x), fold(f64::max, f64::NEG_INFINITY, &|p| p.x));
    let (y0, y1) = padded(
        fold(f64::min, f64::INFINITY, &|p| p.mean - p.std.unwrap_or(0.0)),
        fold(f64::max, f64::NEG_INFINITY, &|p| p.mean + p.std.unwrap_or(0.0)),
    );

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw()?;
    for (i, s) in series.iter().enumerate() {
        let colour = Palette99::pick(i).to_rgba();
        let banded: Vec<&Point> = s.points.iter().filter(|p| p.std.is_some()).collect();
        if banded.len() > 1 {
            let upper = banded.iter().map(|p| (p.x, p.mean + p.std.unwrap_or(0.0)));
            let lower = banded.iter().rev().map(|p| (p.x, p.mean - p.std.unwrap_or(0.0)));
            chart.draw_series(std::iter::once(Polygon::new(upper.chain(lower).collect::<Vec<_>>(), colour.mix(0.2).filled())))?;
        }
        chart
            .draw_series(LineSeries::new(s.points.iter().map(|p| (p.x, p.mean)), colour.stroke_width(2)))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour.stroke_width(2)));
        chart.draw_series(s.points.iter().map(|p| Circle::new((p.x, p.mean), 3, colour.filled())))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()?;
    root.present()?;
    Ok(())
}

fn write_points(path: &Path, points: &[Point]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["x", "mean", "std", "n"])?;
    for p in points {
        let std = p.std.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([p.x.to_string(), p.mean.to_string(), std, p.n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

enum Kind {
    EvalLog,
    Sweep,
}

fn kind_of(p: &Path) -> Option<Kind> {
    match p.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => Some(Kind::EvalLog),
        Some("csv") => Some(Kind::Sweep),
        _ => None,
    }
}

/// Aggregates the inputs into one curve; returns the SVG path.
pub fn plot(a: &PlotArgs) -> CliResult<PathBuf> {
    let kinds: Vec<Kind> = a
        .inputs
        .iter()
        .map(|p| {
            kind_of(p).ok_or_else(|| CliError::usage(format!("{}: expected a .jsonl or .csv input", p.display())))
        })
        .collect::<CliResult<_>>()?;
    let sweep = matches!(kinds[0], Kind::Sweep);
    if kinds.iter().any(|k| matches!(k, Kind::Sweep) != sweep) {
        return Err(CliError::usage("inputs mix eval logs and sweep tables"));
    }
    let runs: Vec<Vec<(f64, f64)>> = a
        .inputs
        .iter()
        .map(|p| if sweep { read_sweep_table(p, a.metric) } else { read_eval_log(p, a.metric, a.stage) })
        .collect::<Result<_>>()?;
    let points = aggregate(&runs);
    if points.is_empty() {
        return Err(anyhow!("the inputs share no x positions").into());
    }
    let metric = match a.metric {
        Metric::Mask => "mask AP",
        Metric::Box => "box AP",
    };
    let out = a.out.clone().unwrap_or_else(|| {
        let first = &a.inputs[0];
        let stem = first.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        first.with_file_name(format!("{stem}_{}.svg", metric.replace(' ', "_")))
    });
    let label = if runs.len() > 1 { format!("{metric}, mean ± std of {}", runs.len()) } else { metric.to_string() };
    let x_desc = if sweep { "value" } else { "step" };
    draw(&out, &format!("{metric} against {x_desc}"), x_desc, metric, &[Series { label, points: points.clone() }])?;
    write_points(&out.with_extension("csv"), &points)?;
    println!("{} points from {} input(s) -> {}", points.len(), runs.len(), out.display());
    Ok(out)
}
