//! Grid sweeps over one pseudo-labelling hyperparameter.
//!
//! Every value gets its own mutual-training run directory, all starting from
//! the same burn-in checkpoint. Runs go one after another in this process,
//! or with `--parallel N` as up to N child processes at a time.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::args::{fresh_dir, output_root, ConfigArgs};
use crate::commands::RunSummary;
use crate::plot::{draw, Point, Series};
use crate::{run_args, CliError, CliResult};

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    #[value(name = "tau_cls")]
    TauCls,
    #[value(name = "lambda")]
    Lambda,
    #[value(name = "tau_iou")]
    TauIou,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::TauCls => "tau_cls",
            SweepParam::Lambda => "lambda",
            SweepParam::TauIou => "tau_iou",
        }
    }

    pub fn key(self) -> String {
        format!("ssl.{}", self.name())
    }
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Hyperparameter to vary.
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Values in table order, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub values: Vec<String>,
    /// Burn-in checkpoint shared by all runs; trained once in the sweep
    /// directory when absent.
    #[arg(long, value_name = "CHECKPOINT")]
    pub init_from: Option<PathBuf>,
    /// Child processes to run at once; 1 runs everything in this process.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub box_ap: f64,
    pub mask_ap: f64,
    pub best_step: usize,
    pub cls_pass_rate: Option<f64>,
    pub mask_pass_rate: Option<f64>,
    pub run_dir: String,
}

/// Where a sweep wrote its table and figure.
#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub dir: PathBuf,
    pub csv: PathBuf,
    pub plot: PathBuf,
    pub rows: Vec<SweepRow>,
}

fn train_argv(base: &Path, stage: &str, run_dir: &Path) -> Vec<String> {
    vec![
        "polite-teacher".into(),
        "train".into(),
        "--config".into(),
        base.display().to_string(),
        "--stage".into(),
        stage.into(),
        "--run-dir".into(),
        run_dir.display().to_string(),
    ]
}

fn wait(child: &mut Child, dir: &Path) -> anyhow::Result<()> {
    let status = child.wait().context("waiting for sweep run")?;
    if !status.success() {
        bail!("sweep run in {} failed ({status}); see its stdout.log", dir.display());
    }
    Ok(())
}

fn run_children(jobs: &[(PathBuf, Vec<String>)], parallel: usize) -> anyhow::Result<()> {
    let exe = std::env::current_exe().context("locating the executable")?;
    for batch in jobs.chunks(parallel) {
        let mut running = Vec::new();
        for (dir, argv) in batch {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let out = File::create(dir.join("stdout.log")).context("creating stdout.log")?;
            let child = Command::new(&exe)
                .args(&argv[1..])
                .stdout(out)
                .stderr(Stdio::inherit())
                .spawn()
                .with_context(|| format!("starting {}", exe.display()))?;
            running.push((child, dir));
        }
        for (mut child, dir) in running {
            wait(&mut child, dir)?;
        }
    }
    Ok(())
}

fn value_label(v: &str) -> String {
    v.replace(['/', ' '], "_")
}

pub fn sweep(a: &SweepArgs) -> CliResult<SweepOutput> {
    if a.parallel == 0 {
        return Err(CliError::usage("--parallel must be at least 1"));
    }
    if a.config.disable_maskiou && a.param == SweepParam::TauIou {
        return Err(CliError::usage("--disable-maskiou removes the gate that tau_iou controls"));
    }
    let mut numeric = Vec::with_capacity(a.values.len());
    for v in &a.values {
        let x: f64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("sweep value `{v}` is not a number")))?;
        numeric.push(x);
    }
    // every point must resolve before any training starts
    let mut base_args = a.config.clone();
    for v in &a.values {
        base_args.set.push(format!("{}={}", a.param.key(), v.trim()));
        base_args.resolve()?;
        base_args.set.pop();
    }
    let resolved = base_args.resolve()?;
    let dir = match resolved.run_dir() {
        Some(d) => d,
        None => fresh_dir(&output_root(), &format!("sweep_{}", a.param.name())),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let base = dir.join("base.resolved");
    fs::write(&base, resolved.to_text()?).context("writing base.resolved")?;

    let init = match &a.init_from {
        Some(p) if !p.is_file() => {
            return Err(CliError::usage(format!("checkpoint {} does not exist", p.display())))
        }
        Some(p) => p.clone(),
        None => {
            let burn = dir.join("burnin");
            run_args(train_argv(&base, "burnin", &burn))?;
            burn.join("best_burnin")
        }
    };

    let jobs: Vec<(PathBuf, Vec<String>)> = a
        .values
        .iter()
        .map(|v| {
            let run = dir.join(format!("{}_{}", a.param.name(), value_label(v.trim())));
            let mut argv = train_argv(&base, "mutual", &run);
            argv.extend([
                "--init-from".into(),
                init.display().to_string(),
                "--set".into(),
                format!("{}={}", a.param.key(), v.trim()),
            ]);
            (run, argv)
        })
        .collect();
    if a.parallel == 1 {
        for (_, argv) in &jobs {
            run_args(argv.clone())?;
        }
    } else {
        run_children(&jobs, a.parallel)?;
    }

    let mut rows = Vec::with_capacity(jobs.len());
    for ((run, _), v) in jobs.iter().zip(&a.values) {
        let summary = RunSummary::load(run)?;
        let Some(m) = summary.mutual else {
            return Err(anyhow::anyhow!("{} has no mutual-stage summary", run.display()).into());
        };
        rows.push(SweepRow {
            param: a.param.name().into(),
            value: v.trim().into(),
            box_ap: m.best_map_box,
            mask_ap: m.best_map_mask,
            best_step: m.best_step,
            cls_pass_rate: m.cls_pass_rate,
            mask_pass_rate: m.mask_pass_rate,
            run_dir: run.display().to_string(),
        });
    }

    let csv_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).context("creating sweep.csv")?;
    for r in &rows {
        w.serialize(r).context("writing sweep.csv")?;
    }
    w.flush().context("writing sweep.csv")?;

    let series = |label: &str, ap: fn(&SweepRow) -> f64| {
        let mut points: Vec<Point> =
            rows.iter().zip(&numeric).map(|(r, &x)| Point::single(x, ap(r))).collect();
        points.sort_by(|p, q| p.x.total_cmp(&q.x));
        Series { label: label.into(), points }
    };
    let plot_path = dir.join("sweep.svg");
    draw(
        &plot_path,
        &format!("AP against {}", a.param.name()),
        a.param.name(),
        "AP",
        &[series("box AP", |r| r.box_ap), series("mask AP", |r| r.mask_ap)],
    )?;
    for r in &rows {
        println!(
            "{} = {}: box AP {:.4}, mask AP {:.4}, pass rates cls {} mask {}",
            r.param,
            r.value,
            r.box_ap,
            r.mask_ap,
            fmt_rate(r.cls_pass_rate),
            fmt_rate(r.mask_pass_rate)
        );
    }
    println!("table {}, plot {}", csv_path.display(), plot_path.display());
    Ok(SweepOutput { dir, csv: csv_path, plot: plot_path, rows })
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}
