use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, ValueEnum};
use polite_teacher::config::RunConfig;
use polite_teacher::data::{generate_synthetic_shapes, write_coco_dataset, CategoryMap, SHAPE_NAMES};
use polite_teacher::eval::{evaluate, EvalResult};
use polite_teacher::model::{load_checkpoint, Detector, DetectorParams};
use polite_teacher::rng;
use polite_teacher::ssl::{burn_in_train, mutual_train, RunLog, Stage, TrainData, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::args::{fresh_dir, output_root, ConfigArgs};
use crate::corpus::{ensure_same_classes, load_corpus, load_train, load_val, partition, split_for};
use crate::{CliError, CliResult};

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// Number of images.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Number of shape classes (2 to 6).
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Upper bound on instances per image.
    #[arg(long, default_value_t = 4)]
    pub max_instances: usize,
    /// Output directory for `images/` and `annotations.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Writes the corpus and returns the annotation file.
pub fn gen_data(a: &GenDataArgs) -> CliResult<PathBuf> {
    if !(2..=SHAPE_NAMES.len()).contains(&a.classes) {
        return Err(CliError::usage(format!(
            "--classes must be between 2 and {}, got {}",
            SHAPE_NAMES.len(),
            a.classes
        )));
    }
    if a.n == 0 || a.max_instances == 0 {
        return Err(CliError::usage("--n and --max-instances must be positive"));
    }
    let records = generate_synthetic_shapes(a.n, a.size, a.classes, a.max_instances, a.seed)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let cats = CategoryMap::sequential(&SHAPE_NAMES[..a.classes]);
    let out = a.out.clone().unwrap_or_else(|| {
        output_root().join(format!("shapes_n{}_s{}_c{}_seed{}", a.n, a.size, a.classes, a.seed))
    });
    let path = write_coco_dataset(&out, &records, &cats)?;

    let mut per_class = vec![0usize; a.classes];
    for ann in records.iter().flat_map(|r| &r.annotations) {
        per_class[ann.category_id] += 1;
    }
    let counts: Vec<String> = cats.names.iter().zip(&per_class).map(|(n, c)| format!("{n} {c}")).collect();
    println!(
        "{} images of {px}x{px}, {} instances ({}) -> {}",
        records.len(),
        per_class.iter().sum::<usize>(),
        counts.join(", "),
        path.display(),
        px = a.size,
    );
    Ok(path)
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Manifest path; defaults to a file under $POLITE_TEACHER_RUNDIR.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn split(a: &SplitArgs) -> CliResult<PathBuf> {
    let cfg = a.config.resolve()?.config;
    let (records, _) = load_train(&cfg)?;
    let m = split_for(&cfg, &records)?;
    let out = a.out.clone().unwrap_or_else(|| {
        output_root().join(format!("split_f{}_seed{}.txt", cfg.data.fraction, cfg.seed))
    });
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    m.save(&out)?;
    println!(
        "dataset {}: {} labelled, {} unlabelled (fraction {}, seed {}) -> {}",
        m.dataset_id,
        m.supervised_ids.len(),
        m.unsupervised_ids.len(),
        m.fraction,
        m.seed,
        out.display()
    );
    Ok(out)
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageArg {
    /// Burn-in followed by mutual training.
    Both,
    Burnin,
    Mutual,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum, default_value_t = StageArg::Both)]
    pub stage: StageArg,
    /// Burn-in checkpoint to start mutual training from (`--stage mutual`).
    #[arg(long, value_name = "CHECKPOINT")]
    pub init_from: Option<PathBuf>,
}

/// Outcome of one stage as stored in `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub best_step: usize,
    pub best_map_mask: f64,
    /// Box AP at the best mask-AP evaluation.
    pub best_map_box: f64,
    pub final_map_mask: f64,
    pub steps: usize,
    pub stopped_early: bool,
    /// Pooled pseudo-label pass rates, mutual stage only.
    pub cls_pass_rate: Option<f64>,
    pub mask_pass_rate: Option<f64>,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub burnin: Option<StageSummary>,
    pub mutual: Option<StageSummary>,
}

impl RunSummary {
    pub fn load(run_dir: &Path) -> anyhow::Result<Self> {
        let path = run_dir.join("summary.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn summarise(stage: Stage, o: &TrainOutcome, seconds: f64, checkpoint: PathBuf) -> StageSummary {
    let best_box = o
        .evals
        .iter()
        .find(|e| e.step == o.best_step)
        .map_or(0.0, |e| e.map_box);
    let pseudo = o.pseudo_totals();
    StageSummary {
        stage,
        best_step: o.best_step,
        best_map_mask: o.best_map_mask,
        best_map_box: best_box,
        final_map_mask: o.evals.last().map_or(0.0, |e| e.map_mask),
        steps: o.steps.len(),
        stopped_early: o.stopped_early,
        cls_pass_rate: pseudo.cls_pass_rate(),
        mask_pass_rate: pseudo.mask_pass_rate(),
        seconds,
        checkpoint,
    }
}

fn print_stage(s: &StageSummary) {
    println!(
        "{:?}: best mask AP {:.4} (box {:.4}) at step {} of {}{}, {:.0}s -> {}",
        s.stage,
        s.best_map_mask,
        s.best_map_box,
        s.best_step,
        s.steps,
        if s.stopped_early { " (stopped early)" } else { "" },
        s.seconds,
        s.checkpoint.display()
    );
}

/// Chooses and creates the run directory, then writes `config.resolved`.
fn prepare_run_dir(args: &ConfigArgs, stem: &str) -> CliResult<(RunConfig, PathBuf)> {
    let mut resolved = args.resolve()?;
    let dir = match resolved.run_dir() {
        Some(d) => d,
        None => fresh_dir(&output_root(), stem),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    resolved.config.run_dir = Some(dir.display().to_string());
    let text = resolved.to_text()?;
    fs::write(dir.join("config.resolved"), text).context("writing config.resolved")?;
    Ok((resolved.config, dir))
}

pub fn train(a: &TrainArgs) -> CliResult<RunSummary> {
    let init = match (a.stage, &a.init_from) {
        (StageArg::Mutual, None) => {
            return Err(CliError::usage("--stage mutual requires --init-from <checkpoint>"))
        }
        (StageArg::Mutual, Some(p)) if !p.is_file() => {
            return Err(CliError::usage(format!("checkpoint {} does not exist", p.display())))
        }
        (StageArg::Mutual, Some(p)) => Some(p.clone()),
        (_, Some(_)) => return Err(CliError::usage("--init-from only applies to --stage mutual")),
        (_, None) => None,
    };
    let stem = match a.stage {
        StageArg::Both => "train",
        StageArg::Burnin => "burnin",
        StageArg::Mutual => "mutual",
    };
    let (cfg, dir) = prepare_run_dir(&a.config, stem)?;
    let corpus = load_corpus(&cfg)?;
    let split = split_for(&cfg, &corpus.train)?;
    split.save(&dir.join("split.txt"))?;
    let (sup, unsup) = partition(&corpus.train, &split);
    log::info!("{} labelled, {} unlabelled, {} validation images", sup.len(), unsup.len(), corpus.val.len());
    let data = TrainData { sup: &sup, unsup: &unsup, val: &corpus.val };
    let tc = cfg.train_config();
    let mut log = RunLog::create(&dir)?;
    let mut summary = RunSummary { run_dir: dir.clone(), burnin: None, mutual: None };

    let theta = match init {
        Some(path) => {
            let p = load_checkpoint(&path)?;
            ensure_same_classes(&corpus.categories, &p.meta.categories, "checkpoint")?;
            p
        }
        None => {
            let (det, params) = Detector::init(
                cfg.model_config()?,
                corpus.categories.clone(),
                &mut rng::stream(cfg.seed, "init", 0),
            )?;
            let t0 = Instant::now();
            let out = burn_in_train(&det, params, &data, &cfg.burnin, &tc, &mut log)?;
            let s = summarise(Stage::Burnin, &out, t0.elapsed().as_secs_f64(), dir.join("best_burnin"));
            print_stage(&s);
            summary.burnin = Some(s);
            out.best
        }
    };

    if a.stage != StageArg::Burnin {
        let det = Detector::for_params(&theta)?;
        let t0 = Instant::now();
        let out = mutual_train(&det, &theta, &data, &cfg.mutual, &tc, &mut log)?;
        let s = summarise(Stage::Mutual, &out, t0.elapsed().as_secs_f64(), dir.join("best_teacher"));
        print_stage(&s);
        summary.mutual = Some(s);
    }
    let json = serde_json::to_string_pretty(&summary).context("serialising summary")?;
    fs::write(dir.join("summary.json"), json).context("writing summary.json")?;
    Ok(summary)
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Result file; defaults to `<checkpoint>.eval.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Scores a checkpoint on the configured validation data.
pub fn eval(a: &EvalArgs) -> CliResult<EvalResult> {
    let cfg = a.config.resolve()?.config;
    let params: DetectorParams = load_checkpoint(&a.checkpoint)?;
    let (records, cats) = load_val(&cfg)?;
    ensure_same_classes(&params.meta.categories, &cats, "dataset")?;
    let det = Detector::for_params(&params)?;
    let result = evaluate(&det, &params, &records, &cfg.postprocess)?;
    let json = result.to_json();
    println!("{json}");
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.eval.json", a.checkpoint.display())));
    fs::write(&out, json).with_context(|| format!("writing {}", out.display()))?;
    Ok(result)
}
