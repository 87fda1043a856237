use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use polite_teacher::config::ResolvedConfig;
use polite_teacher::data::{generate_synthetic_shapes, make_supervision_split, SplitManifest};
use polite_teacher::eval::EvalResult;
use polite_teacher::ssl::{EvalPoint, Stage, StepRecord};
use polite_teacher_cli::{run_args, CliError, RunSummary};

const BIN: &str = env!("CARGO_BIN_EXE_polite-teacher");

/// A few seconds of training on a tiny synthetic corpus.
const TINY: &[&str] = &[
    "--synthetic-images", "40",
    "--set", "data.synthetic_val_images=8",
    "--set", "burnin.lr_drop_steps=",
    "--burnin-steps", "6",
    "--mutual-steps", "6",
    "--eval-every", "3",
    "--batch-sup", "2",
    "--batch-unsup", "2",
];

fn argv(parts: &[&str]) -> Vec<String> {
    std::iter::once("polite-teacher").chain(parts.iter().copied()).map(String::from).collect()
}

fn run_ok(parts: &[&str]) {
    if let Err(e) = run_args(argv(parts)) {
        panic!("{parts:?} failed: {e:#}");
    }
}

fn exit_code(parts: &[&str], root: &Path) -> i32 {
    let out = Command::new(BIN)
        .args(parts)
        .env("POLITE_TEACHER_RUNDIR", root)
        .output()
        .unwrap();
    out.status.code().unwrap()
}

fn tiny_train(dir: &Path, extra: &[&str]) -> RunSummary {
    let d = dir.display().to_string();
    let mut parts = vec!["train", "--run-dir", &d];
    parts.extend_from_slice(TINY);
    parts.extend_from_slice(extra);
    run_ok(&parts);
    RunSummary::load(dir).unwrap()
}

/// `key = value` lines of a resolved config without the provenance comments.
fn values(text: &str) -> Vec<&str> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split("  #").next().unwrap())
        .collect()
}

fn jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn read_points(path: &Path) -> Vec<(f64, f64, Option<f64>)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            let std = rec[2].parse().ok();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap(), std)
        })
        .collect()
}

#[test]
fn gen_data_is_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for d in [&a, &b] {
        let d = d.display().to_string();
        run_ok(&["gen-data", "--n", "12", "--size", "64", "--classes", "3", "--seed", "1", "--out", &d]);
    }
    let ja = fs::read(a.join("annotations.json")).unwrap();
    assert_eq!(ja, fs::read(b.join("annotations.json")).unwrap());
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 12);
    let doc: serde_json::Value = serde_json::from_slice(&ja).unwrap();
    assert_eq!(doc["images"].as_array().unwrap().len(), 12);
    assert_eq!(doc["categories"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    assert_eq!(exit_code(&["gen-data", "--n", "4", "--classes", "2"], r), 0);
    assert!(r.join("shapes_n4_s64_c2_seed1/annotations.json").is_file(), "output root from the environment");
    for usage in [
        &["gen-data", "--classes", "1"][..],
        &["train", "--stage", "mutual"],
        &["train", "--stage", "mutual", "--init-from", "/nonexistent/ckpt"],
        &["train", "--set", "ssl.no_such_key=1"],
        &["train", "--tau-cls", "1.5"],
        &["sweep", "--param", "gamma", "--values", "1,2"],
        &["sweep", "--param", "tau_iou", "--values", "0,x"],
        &["frobnicate"],
    ] {
        assert_eq!(exit_code(usage, r), 1, "{usage:?}");
    }
    assert_eq!(exit_code(&["eval", "--checkpoint", "/nonexistent/ckpt"], r), 2);
    assert_eq!(exit_code(&["--help"], r), 0);

    assert!(matches!(run_args(argv(&["gen-data", "--classes", "1"])), Err(CliError::Usage(_))));
    assert!(matches!(run_args(argv(&["train", "--stage", "mutual"])), Err(CliError::Usage(_))));
}

#[test]
fn train_writes_the_run_directory() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    let s = tiny_train(&dir, &["--seed", "7", "--fraction", "0.05"]);
    for f in ["config.resolved", "events.log", "eval.jsonl", "split.txt", "best_burnin", "best_teacher", "summary.json"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    for n in [3, 6] {
        assert!(dir.join(format!("checkpoints/burnin_step_{n}")).is_file());
        assert!(dir.join(format!("checkpoints/mutual_step_{n}")).is_file());
    }
    let evals: Vec<EvalPoint> = jsonl(&dir.join("eval.jsonl"));
    let stages: Vec<(Stage, usize)> = evals.iter().map(|e| (e.stage, e.step)).collect();
    assert_eq!(stages, [(Stage::Burnin, 3), (Stage::Burnin, 6), (Stage::Mutual, 3), (Stage::Mutual, 6)]);
    let split = SplitManifest::load(&dir.join("split.txt")).unwrap();
    assert_eq!((split.supervised_ids.len(), split.seed), (2, 7));
    assert_eq!(s.burnin.unwrap().steps, 6);
    assert_eq!(s.mutual.unwrap().steps, 6);

    // the resolved file alone reproduces the configuration
    let text = fs::read_to_string(dir.join("config.resolved")).unwrap();
    let again = ResolvedConfig::resolve(Some(&text), &[]).unwrap();
    assert_eq!(values(&again.to_text().unwrap()), values(&text));
    assert_eq!(again.config.seed, 7);
    assert_eq!(again.config.data.fraction, 0.05);
}

#[test]
fn lambda_zero_logs_no_unsupervised_terms() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    tiny_train(&dir, &["--lambda", "0"]);
    let steps: Vec<StepRecord> = jsonl(&dir.join("events.log"));
    let mutual: Vec<&StepRecord> = steps.iter().filter(|s| s.stage == Stage::Mutual).collect();
    assert_eq!(mutual.len(), 6);
    assert!(mutual.iter().all(|s| s.unsup.is_none() && s.pseudo.is_none()));
    let raw = fs::read_to_string(dir.join("events.log")).unwrap();
    assert!(raw.lines().all(|l| l.contains("\"unsup\":null")));
}

#[test]
fn mutual_stage_from_a_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let first = root.path().join("first");
    let d = first.display().to_string();
    let mut parts = vec!["train", "--stage", "burnin", "--run-dir", &d];
    parts.extend_from_slice(TINY);
    run_ok(&parts);
    assert!(!first.join("best_teacher").exists());

    let second = root.path().join("second");
    let (d2, ck) = (second.display().to_string(), first.join("best_burnin").display().to_string());
    let mut parts = vec!["train", "--stage", "mutual", "--init-from", &ck, "--run-dir", &d2];
    parts.extend_from_slice(TINY);
    run_ok(&parts);
    let s = RunSummary::load(&second).unwrap();
    assert!(s.burnin.is_none());
    assert_eq!(s.mutual.unwrap().steps, 6);
}

#[test]
fn fractions_and_split_files() {
    let root = tempfile::tempdir().unwrap();
    for (f, n) in [("0.01", 2), ("0.02", 4), ("0.05", 10), ("0.10", 20)] {
        let out = root.path().join(format!("split_{f}.txt"));
        let o = out.display().to_string();
        run_ok(&["split", "--synthetic-images", "200", "--fraction", f, "--seed", "3", "--out", &o]);
        let m = SplitManifest::load(&out).unwrap();
        assert_eq!((m.supervised_ids.len(), m.unsupervised_ids.len()), (n, 200 - n));
    }

    // a corpus written to disk splits exactly like the same corpus in memory
    let data = root.path().join("data");
    let d = data.display().to_string();
    run_ok(&["gen-data", "--n", "50", "--seed", "4", "--out", &d]);
    let ann = data.join("annotations.json").display().to_string();
    let out = root.path().join("from_file.txt");
    let o = out.display().to_string();
    run_ok(&["split", "--train-annotations", &ann, "--val-annotations", &ann, "--fraction", "0.1", "--seed", "5", "--out", &o]);
    let recs = generate_synthetic_shapes(50, 64, 3, 4, 4).unwrap();
    assert_eq!(SplitManifest::load(&out).unwrap(), make_supervision_split(&recs, 0.1, 5).unwrap());
}

#[test]
fn eval_writes_json_and_checks_classes() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    let d = dir.display().to_string();
    let mut parts = vec!["train", "--stage", "burnin", "--run-dir", &d];
    parts.extend_from_slice(TINY);
    run_ok(&parts);
    let ck = dir.join("best_burnin");
    let c = ck.display().to_string();
    let out = root.path().join("eval.json");
    let o = out.display().to_string();
    run_ok(&["eval", "--checkpoint", &c, "--out", &o, "--set", "data.synthetic_val_images=8"]);
    let r: EvalResult = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r.num_images, 8);
    assert_eq!(r.per_threshold.len(), 10);
    let mean = r.per_threshold.iter().map(|t| t.mask_ap).sum::<f64>() / 10.0;
    assert!((mean - r.map_mask).abs() < 1e-12);
    // the summary's best burn-in score came from the same validation set
    let best = RunSummary::load(&dir).unwrap().burnin.unwrap();
    assert!((best.best_map_mask - r.map_mask).abs() < 1e-12);

    // a four-class dataset against a three-class checkpoint
    let err = run_args(argv(&["eval", "--checkpoint", &c, "--num-classes", "4"])).unwrap_err();
    assert!(matches!(err, CliError::Runtime(_)));
    assert!(format!("{err:#}").contains("classes"), "{err:#}");
}

#[test]
fn sweep_table_follows_value_order() {
    let root = tempfile::tempdir().unwrap();
    let burn = root.path().join("burn");
    let b = burn.display().to_string();
    let mut parts = vec!["train", "--stage", "burnin", "--run-dir", &b];
    parts.extend_from_slice(TINY);
    run_ok(&parts);
    let ck = burn.join("best_burnin").display().to_string();

    let dir = root.path().join("sweep");
    let d = dir.display().to_string();
    let mut parts = vec!["sweep", "--param", "tau_cls", "--values", "0.5,0.6,0.7,0.9", "--init-from", &ck, "--run-dir", &d];
    parts.extend_from_slice(TINY);
    run_ok(&parts);
    let mut r = csv::Reader::from_path(dir.join("sweep.csv")).unwrap();
    let headers: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers.iter().filter(|h| h.ends_with("_ap")).count(), 2);
    let values: Vec<String> = r.records().map(|x| x.unwrap()[1].to_string()).collect();
    assert_eq!(values, ["0.5", "0.6", "0.7", "0.9"]);
    assert!(dir.join("sweep.svg").is_file());
    for v in &values {
        let run = RunSummary::load(&dir.join(format!("tau_cls_{v}"))).unwrap();
        assert!(run.mutual.is_some());
    }

    // child processes, disjoint run directories, same table
    let par = root.path().join("parallel");
    let p = par.display().to_string();
    let mut parts = vec!["sweep", "--param", "tau_cls", "--values", "0.9,0.5", "--parallel", "2", "--init-from", &ck, "--run-dir", &p];
    parts.extend_from_slice(TINY);
    assert_eq!(exit_code(&parts, root.path()), 0);
    let mut r = csv::Reader::from_path(par.join("sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.iter().map(|x| x[1].to_string()).collect::<Vec<_>>(), ["0.9", "0.5"]);
    // same seed and config give the same numbers as the in-process run
    let mut seq = csv::Reader::from_path(dir.join("sweep.csv")).unwrap();
    let seq: Vec<csv::StringRecord> = seq.records().map(Result::unwrap).collect();
    let aps = |r: &csv::StringRecord| (r[2].to_string(), r[3].to_string());
    assert_eq!(aps(&rows[0]), aps(&seq[3]));
    assert_eq!(aps(&rows[1]), aps(&seq[0]));
    assert!(par.join("tau_cls_0.9/stdout.log").is_file());

    let mut bad = vec!["sweep", "--param", "tau_iou", "--values", "0,0.5", "--disable-maskiou", "--init-from", &ck];
    bad.extend_from_slice(TINY);
    assert!(matches!(run_args(argv(&bad)), Err(CliError::Usage(_))));
}

fn write_log(path: &Path, points: &[(Stage, usize, f64)]) {
    let text: String = points
        .iter()
        .map(|&(stage, step, ap)| {
            serde_json::to_string(&EvalPoint { stage, step, map_box: ap / 2.0, map_mask: ap }).unwrap() + "\n"
        })
        .collect();
    fs::write(path, text).unwrap();
}

#[test]
fn plot_averages_runs() {
    let root = tempfile::tempdir().unwrap();
    let runs = [[0.10, 0.20, 0.30], [0.14, 0.26, 0.31], [0.12, 0.17, 0.35]];
    let mut inputs: Vec<PathBuf> = Vec::new();
    for (i, aps) in runs.iter().enumerate() {
        let p = root.path().join(format!("run{i}.jsonl"));
        write_log(&p, &[(Stage::Burnin, 100, aps[0]), (Stage::Mutual, 100, aps[1]), (Stage::Mutual, 200, aps[2])]);
        inputs.push(p);
    }
    let out = root.path().join("curve.svg");
    let o = out.display().to_string();
    let mut parts: Vec<String> = vec!["plot".into()];
    parts.extend(inputs.iter().map(|p| p.display().to_string()));
    parts.extend(["--out".into(), o.clone()]);
    run_ok(&parts.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(fs::read_to_string(&out).unwrap().starts_with("<svg"));
    let pts = read_points(&out.with_extension("csv"));
    // mutual steps continue after the last burn-in step
    assert_eq!(pts.iter().map(|p| p.0).collect::<Vec<_>>(), [100.0, 200.0, 300.0]);
    for (k, p) in pts.iter().enumerate() {
        let ys: Vec<f64> = runs.iter().map(|r| r[k]).collect();
        let mean = ys.iter().sum::<f64>() / 3.0;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((p.1 - mean).abs() < 1e-12);
        assert!((p.2.unwrap() - var.sqrt()).abs() < 1e-12);
    }

    // one run: the plain curve without a band
    let single = root.path().join("single.svg");
    let s = single.display().to_string();
    let first = inputs[0].display().to_string();
    run_ok(&["plot", &first, "--out", &s, "--stage", "mutual", "--metric", "box"]);
    let pts = read_points(&single.with_extension("csv"));
    assert_eq!(pts, [(100.0, 0.10, None), (200.0, 0.15, None)]);
}

#[test]
fn plot_reports_malformed_lines() {
    let root = tempfile::tempdir().unwrap();
    let log = root.path().join("bad.jsonl");
    fs::write(&log, "{\"stage\":\"burnin\",\"step\":1,\"map_box\":0.1,\"map_mask\":0.2}\n{\"stage\": oops}\n").unwrap();
    let err = run_args(argv(&["plot", &log.display().to_string()])).unwrap_err();
    assert!(format!("{err:#}").contains("line 2"), "{err:#}");
    assert_eq!(exit_code(&["plot", &log.display().to_string()], root.path()), 2);

    let table = root.path().join("bad.csv");
    fs::write(&table, "param,value,box_ap,mask_ap\ntau_cls,0.5,0.1,0.2\ntau_cls,0.6,zero,0.3\n").unwrap();
    let err = run_args(argv(&["plot", &table.display().to_string(), "--metric", "box"])).unwrap_err();
    assert!(format!("{err:#}").contains("line 3"), "{err:#}");

    let mixed = run_args(argv(&["plot", &log.display().to_string(), &table.display().to_string()]));
    assert!(matches!(mixed, Err(CliError::Usage(_))));
}
