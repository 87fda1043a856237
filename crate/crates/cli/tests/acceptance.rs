//! Acceptance suite: one line per criterion, PASS / FAIL (or WARN for the
//! soft convergence-speed check), then a hard failure if any criterion failed.
//!
//! The desk-scale experiments train three seeds end to end through the CLI
//! (about half an hour on one CPU core). Run directories are kept under the
//! cargo target directory for inspection.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use polite_nn::layers::Conv2d;
use polite_nn::{Graph, ParamStore, Tensor};
use polite_teacher::config::RunConfig;
use polite_teacher::data::{generate_synthetic_shapes, BBox, BinaryMask, GeometryLog, ImageRecord};
use polite_teacher::eval::{average_precision, evaluate_predictions, Scored};
use polite_teacher::losses::{
    centreness_loss, focal_loss_sum, iou_loss, mask_iou_loss, mask_loss, unsupervised_loss, LossConfig, MaskOutputs,
    UnsupImage,
};
use polite_teacher::model::{
    sag_mask_attention, sample_mask_on_grid, DetectionOutput, Detector, DetectorParams, InstancePrediction,
    LevelOutput,
};
use polite_teacher::ssl::{
    compute_step, generate_pseudo_labels, init_mutual, student_step, supervised_step, EvalPoint, PseudoInstance,
    PseudoLabels, Stage, StepRecord, UnsupSample,
};
use polite_teacher::targets::{compute_centreness, PyramidSpec};
use polite_teacher_cli::{run_args, RunSummary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

/// Writes straight to the process stdout so the lines survive test capture.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Suite {
    lines: Vec<(u8, String)>,
    failed: Vec<u8>,
}

impl Suite {
    fn run(&mut self, id: u8, name: &str, soft: bool, f: impl FnOnce() -> Check) {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) if soft => ("WARN", d),
            Err(d) => {
                self.failed.push(id);
                ("FAIL", d)
            }
        };
        let line = format!("[{tag}] criterion {id:>2} {name}: {detail} ({:.1}s)", t0.elapsed().as_secs_f64());
        emit(&line);
        self.lines.push((id, line));
    }
}

fn work_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn cli(parts: &[String]) -> Result<(), String> {
    let argv = std::iter::once("polite-teacher".to_string()).chain(parts.iter().cloned());
    run_args(argv).map_err(|e| format!("{:?} failed: {e:#}", parts.first()))
}

fn strs(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

fn jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

// ---------- 1: centreness ----------

fn centreness_log_form(d: [f64; 4]) -> f64 {
    let (h_lo, h_hi) = (d[0].min(d[2]), d[0].max(d[2]));
    let (v_lo, v_hi) = (d[1].min(d[3]), d[1].max(d[3]));
    (0.5 * (h_lo.ln() - h_hi.ln() + v_lo.ln() - v_hi.ln())).exp()
}

fn criterion_1() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d: [f64; 4] = std::array::from_fn(|_| 10f64.powf(rng.random_range(-3.0..3.0)));
        let c = compute_centreness(d[0], d[1], d[2], d[3]).map_err(|e| e.to_string())?;
        let want = centreness_log_form(d);
        worst = worst.max((c - want).abs() / want);
        ensure!(c == compute_centreness(d[2], d[1], d[0], d[3]).unwrap(), "left/right symmetry broken at {d:?}");
        ensure!(c == compute_centreness(d[0], d[3], d[2], d[1]).unwrap(), "top/bottom symmetry broken at {d:?}");
        let k = 2f64.powi(rng.random_range(-10..10));
        ensure!(c == compute_centreness(k * d[0], k * d[1], k * d[2], k * d[3]).unwrap(), "scale invariance broken at {d:?}");
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(worst <= 1e-12, "max relative error {worst:e}");
    ensure!(secs < 1.0, "took {secs:.2}s");
    Ok(format!("1000 tuples, max rel err {worst:.1e}, symmetries exact"))
}

// ---------- 2: SAG-Mask ----------

fn sag_loops(x: &[f32], [n, c, h, w]: [usize; 4], k: &[f32], b: f32) -> Vec<f64> {
    let at = |i: usize, ch: usize, y: usize, xx: usize| x[((i * c + ch) * h + y) * w + xx] as f64;
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        let pooled = |y: usize, xx: usize, which: usize| {
            let v: Vec<f64> = (0..c).map(|ch| at(i, ch, y, xx)).collect();
            if which == 0 {
                v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            } else {
                v.iter().sum::<f64>() / c as f64
            }
        };
        for y in 0..h {
            for xx in 0..w {
                let mut s = b as f64;
                for which in 0..2 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                s += k[(which * 3 + dy) * 3 + dx] as f64 * pooled(sy as usize, sx as usize, which);
                            }
                        }
                    }
                }
                let gate = 1.0 / (1.0 + (-s).exp());
                for ch in 0..c {
                    out[((i * c + ch) * h + y) * w + xx] = gate * at(i, ch, y, xx);
                }
            }
        }
    }
    out
}

fn criterion_2() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "sag", 2, 1, 3, 1, true, &mut rng);
        let bias = rng.random_range(-1.0f32..1.0);
        store.get_mut(conv.bias.unwrap()).data_mut()[0] = bias;
        let shape = [1, rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
        let x: Vec<f32> = (0..shape.iter().product()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let want = sag_loops(&x, shape, store.get(conv.weight).data(), bias);
        let mut g = Graph::inference(&store);
        let xv = g.input(Tensor::new(shape.to_vec(), x));
        let y = sag_mask_attention(&mut g, xv, &conv);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            worst = worst.max((*a as f64 - b).abs());
        }
        ensure!(worst < 1e-6, "trial {trial}: deviation {worst:e}");
    }
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "sag", 2, 1, 3, 1, true, &mut rng);
    store.get_mut(conv.weight).data_mut().fill(0.0);
    store.get_mut(conv.bias.unwrap()).data_mut().fill(0.0);
    let x: Vec<f32> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut g = Graph::inference(&store);
    let xv = g.input(Tensor::new(vec![1, 4, 4, 4], x.clone()));
    let y = sag_mask_attention(&mut g, xv, &conv);
    ensure!(g.value(y).data().iter().zip(&x).all(|(a, b)| *a == 0.5 * b), "zero weights do not give 0.5·x");
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2}s");
    Ok(format!("50 random inputs up to 4x4x4, max deviation {worst:.1e}; zero weights give exactly 0.5x"))
}

// ---------- 3: gradients ----------

/// Largest relative error between `grad` and central differences of `f`.
fn fd_error(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        let (mut up, mut down) = (x.to_vec(), x.to_vec());
        up[i] += h;
        down[i] -= h;
        let numeric = (f(&up) - f(&down)) / (2.0 * h);
        worst = worst.max((grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

fn criterion_3() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut errs = [0f64; 5];
    for _ in 0..25 {
        // focal: separable, so each logit is checked against its own term
        let n = rng.random_range(1..10);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let t = focal_loss_sum(&z, &y, Some(0.25), 2.0).unwrap();
        for i in 0..n {
            let e = fd_error(&z[i..=i], &t.grad[i..=i], |v| focal_loss_sum(v, &y[i..=i], Some(0.25), 2.0).unwrap().value);
            errs[0] = errs[0].max(e);
        }

        let m = rng.random_range(1..6);
        let pred: Vec<[f64; 4]> = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(0.5..20.0))).collect();
        let tgt: Vec<[f64; 4]> = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(0.5..20.0))).collect();
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let t = iou_loss(&pred, &tgt, Some(&w)).unwrap().unwrap();
        let flat: Vec<f64> = pred.iter().flatten().copied().collect();
        errs[1] = errs[1].max(fd_error(&flat, &t.grad, |v| {
            let p: Vec<[f64; 4]> = v.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
            iou_loss(&p, &tgt, Some(&w)).unwrap().unwrap().value
        }));

        let zc: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let tc: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let t = centreness_loss(&zc, &tc).unwrap().unwrap();
        errs[2] = errs[2].max(fd_error(&zc, &t.grad, |v| centreness_loss(v, &tc).unwrap().unwrap().value));

        let rr = 9;
        let logits: Vec<Vec<f64>> = (0..m).map(|_| (0..rr).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let targets: Vec<Vec<f64>> = (0..m).map(|_| (0..rr).map(|_| rng.random_range(0..2) as f64).collect()).collect();
        let t = mask_loss(&logits, &targets).unwrap().unwrap();
        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        errs[3] = errs[3].max(fd_error(&flat, &t.grad, |v| {
            let l: Vec<Vec<f64>> = v.chunks(rr).map(<[f64]>::to_vec).collect();
            mask_loss(&l, &targets).unwrap().unwrap().value
        }));

        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let t = mask_iou_loss(&p, &a).unwrap().unwrap();
        errs[4] = errs[4].max(fd_error(&p, &t.grad, |v| mask_iou_loss(v, &a).unwrap().unwrap().value));
    }
    let names = ["focal", "iou", "centreness", "mask", "mask-iou"];
    let summary: Vec<String> = names.iter().zip(&errs).map(|(n, e)| format!("{n} {e:.1e}")).collect();
    for (n, e) in names.iter().zip(&errs) {
        ensure!(*e < 1e-4, "{n} relative error {e:e}");
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!("25 instances each, max rel err: {}", summary.join(", ")))
}

// ---------- 4 and 5: teacher-student state and gating ----------

fn desk_model() -> (Detector, DetectorParams) {
    let rc = RunConfig::desk();
    Detector::init(rc.model_config().unwrap(), rc.synthetic_categories().unwrap(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn scramble(p: &mut DetectorParams, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = p.store.ids().collect();
    for id in ids {
        for v in p.store.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

fn criterion_4() -> Check {
    let (_, params) = desk_model();
    let alpha = 0.9996;
    let mut state = init_mutual(&params, alpha, 0.9, 1e-4).map_err(|e| e.to_string())?;
    let d_init = state.teacher_student_distance();
    ensure!(d_init == 0.0, "distance after init is {d_init}");
    scramble(&mut state.student, &mut ChaCha8Rng::seed_from_u64(104));
    let d0 = state.teacher_student_distance();
    for _ in 0..10 {
        state.ema_update().unwrap();
    }
    let dk = state.teacher_student_distance();
    let err = (dk / d0 - alpha.powi(10)).abs();
    ensure!(err < 1e-10, "ratio {} vs {} ({err:e})", dk / d0, alpha.powi(10));
    Ok(format!("alpha 0.9996, k = 10: |ratio - alpha^k| = {err:.1e}; distance after init 0"))
}

fn fake_labels(rec: &ImageRecord, score: f32) -> UnsupSample {
    let instances = rec
        .annotations
        .iter()
        .map(|a| PseudoInstance {
            bbox: a.bbox,
            category_id: a.category_id,
            cls_score: score,
            mask: a.mask.clone(),
            mask_iou_score: 0.95,
            passed_cls: true,
            passed_mask: true,
        })
        .collect();
    UnsupSample {
        strong: rec.unlabelled(),
        labels: PseudoLabels {
            image_id: rec.id.clone(),
            geometry: GeometryLog { hflip: false, width: rec.width },
            num_candidates: rec.annotations.len(),
            instances,
        },
    }
}

const SIZE: usize = 32;
const CLASSES: usize = 2;
const R: usize = 4;

/// Loss-level fixture: random head outputs and three pseudo-instances with
/// class scores 0.9, 0.7 and 0.5 and mask-IoU scores 0.95, 0.3 and 0.1.
fn gate_fixture(rng: &mut ChaCha8Rng) -> (DetectionOutput, Tensor, Tensor, PseudoLabels) {
    let mut t = |shape: &[usize], lo: f32, hi: f32| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
    };
    let levels = PyramidSpec::desk()
        .levels
        .iter()
        .map(|l| {
            let g = SIZE.div_ceil(l.stride);
            LevelOutput {
                level: l.level_index,
                stride: l.stride,
                cls_logits: t(&[1, CLASSES, g, g], -3.0, 1.0),
                box_reg: t(&[1, 4, g, g], 1.0, 12.0),
                centreness_logits: t(&[1, 1, g, g], -1.0, 1.0),
            }
        })
        .collect();
    let out = DetectionOutput { levels, image_size: (SIZE, SIZE) };
    let logits = t(&[3, CLASSES, R, R], -2.0, 2.0);
    let iou = Tensor::new(vec![3, CLASSES], vec![0.5; 3 * CLASSES]);
    let boxes = [BBox::new(2.0, 2.0, 14.0, 14.0), BBox::new(10.0, 12.0, 30.0, 30.0), BBox::new(4.0, 18.0, 16.0, 30.0)];
    let instances = boxes
        .iter()
        .zip([(0, 0.9, 0.95), (1, 0.7, 0.3), (0, 0.5, 0.1)])
        .map(|(b, (class, cls_score, mask_iou_score))| {
            let mut mask = BinaryMask::empty(SIZE, SIZE);
            for y in b.y1 as usize..b.y2 as usize {
                for x in b.x1 as usize..b.x2 as usize {
                    mask.set(x, y, true);
                }
            }
            PseudoInstance { bbox: *b, category_id: class, cls_score, mask, mask_iou_score, passed_cls: true, passed_mask: true }
        })
        .collect();
    let labels = PseudoLabels {
        image_id: "u".into(),
        geometry: GeometryLog { hflip: false, width: SIZE },
        num_candidates: 3,
        instances,
    };
    (out, logits, iou, labels)
}

fn criterion_5() -> Check {
    let (det, params) = desk_model();
    let mut cfg = RunConfig::desk().train_config();
    let records = generate_synthetic_shapes(6, 64, 3, 3, 21).unwrap();
    let unsup: Vec<UnsupSample> = records.iter().map(|r| fake_labels(r, 0.99)).collect();
    let all: Vec<_> = params.store.ids().collect();

    cfg.tau_cls = 1.0;
    let s = compute_step(&det, &params, &[], &unsup, &cfg).map_err(|e| e.to_string())?;
    ensure!(s.unsup.cls.is_none() && s.grads.max_abs(all.clone()) == 0.0, "tau_cls = 1 leaves a gradient");
    cfg.tau_cls = 0.6;
    cfg.tau_iou = 1.0;
    let s = compute_step(&det, &params, &[], &unsup, &cfg).unwrap();
    ensure!(s.unsup.cls.is_some(), "classification term missing at tau_cls = 0.6");
    ensure!(s.unsup.mask.is_none() && s.grads.max_abs(det.mask_param_ids()) == 0.0, "tau_iou = 1 leaves a mask gradient");

    // tau_iou = 0: the mask loss covers exactly the class-gate survivors
    let (out, logits, iou, labels) = gate_fixture(&mut ChaCha8Rng::seed_from_u64(105));
    let rr = R * R;
    for tau_cls in [0.0, 0.6, 0.8, 0.95] {
        let mask = MaskOutputs { logits: &logits, iou: Some(&iou) };
        let img = UnsupImage { batch_index: 0, labels: &labels, rows: vec![Some(0), Some(1), Some(2)] };
        let (loss, _) = unsupervised_loss(&out, Some(&mask), &[img], tau_cls, 0.0, &PyramidSpec::desk(), &LossConfig::default())
            .map_err(|e| e.to_string())?;
        let (mut z, mut t) = (Vec::new(), Vec::new());
        for (row, p) in labels.instances.iter().enumerate() {
            if (p.cls_score as f64) > tau_cls {
                let base = (row * CLASSES + p.category_id) * rr;
                z.push(logits.data()[base..base + rr].iter().map(|v| *v as f64).collect::<Vec<_>>());
                t.push(sample_mask_on_grid(&p.mask, &p.bbox, R).into_iter().map(f64::from).collect::<Vec<_>>());
            }
        }
        let want = mask_loss(&z, &t).unwrap().map(|m| m.value);
        let same = match (loss.mask, want) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-9,
            (a, b) => a.is_none() && b.is_none(),
        };
        ensure!(same, "tau_cls {tau_cls}: mask loss {:?} vs survivors {:?}", loss.mask, want);
    }
    let refs: Vec<&ImageRecord> = records.iter().collect();
    let geo: Vec<GeometryLog> = records.iter().map(|r| GeometryLog { hflip: false, width: r.width }).collect();
    let pp = polite_teacher::model::PostprocessConfig { score_floor: 0.0, ..cfg.teacher_pp };
    let set = generate_pseudo_labels(&det, &params, &refs, &geo, 0.0, 0.0, &pp).unwrap();
    let st = set.stats();
    ensure!(st.passed_cls > 0, "no teacher detection survived tau_cls = 0");
    ensure!(st.passed_mask == st.passed_cls, "tau_iou = 0 keeps {} of {} masks", st.passed_mask, st.passed_cls);

    // lambda = 0 against plain supervised training, bit for bit
    cfg.tau_iou = 0.9;
    cfg.weights.lambda_unsup = 0.0;
    let schedule = RunConfig::desk().mutual;
    let mut state = init_mutual(&params, cfg.ema_alpha, 0.9, 1e-4).unwrap();
    let mut plain = params.clone();
    let mut opt = state.optimizer.clone();
    for step in 0..3 {
        student_step(&det, &mut state, &records[..2], &unsup[2..], &schedule, &cfg).unwrap();
        supervised_step(&det, &mut plain, &mut opt, &records[..2], schedule.lr_at(step), step, &cfg).unwrap();
        let diff = state.student.store.max_abs_diff(&plain.store);
        ensure!(diff == 0.0, "lambda = 0 differs from supervised training by {diff:e} at step {step}");
    }
    Ok(format!(
        "tau_cls=1 and tau_iou=1 give zero gradients; tau_iou=0 masks = class survivors ({} of {} teacher detections); lambda=0 bit-exact over 3 steps",
        st.passed_cls, st.candidates
    ))
}

// ---------- 7: AP ----------

/// Greedy matching of every top-k prefix from scratch; interpolated
/// precision at 101 recall levels.
fn brute_force_ap(gts: &[usize], preds: &[(usize, f64, Vec<f64>)], thr: f64) -> f64 {
    let n_gt: usize = gts.iter().sum();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1).then(preds[a].0.cmp(&preds[b].0)).then(a.cmp(&b)));
    let mut curve = Vec::new();
    for k in 1..=order.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|&n| vec![false; n]).collect();
        let mut tp = 0;
        for &p in &order[..k] {
            let (img, _, ious) = &preds[p];
            let best = (0..ious.len())
                .filter(|&j| !used[*img][j] && ious[j] >= thr)
                .fold(None, |b: Option<usize>, j| if b.is_none_or(|b| ious[j] > ious[b]) { Some(j) } else { b });
            if let Some(j) = best {
                used[*img][j] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
    }
    (0..=100)
        .map(|r| curve.iter().filter(|c| c.0 >= r as f64 / 100.0).map(|c| c.1).fold(0.0, f64::max))
        .sum::<f64>()
        / 101.0
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let levels = [0.0, 0.3, 0.5, 0.55, 0.7, 0.9, 1.0];
    let scores = [0.9, 0.8, 0.8, 0.7, 0.5, 0.3];
    let mut fixtures = 0;
    for _ in 0..3000 {
        let images = rng.random_range(1..=2);
        let mut gts = vec![0usize; images];
        for _ in 0..rng.random_range(1..=3) {
            gts[rng.random_range(0..images)] += 1;
        }
        let preds: Vec<(usize, f64, Vec<f64>)> = (0..rng.random_range(0..=5))
            .map(|_| {
                let img = rng.random_range(0..images);
                let ious = (0..gts[img]).map(|_| levels[rng.random_range(0..levels.len())]).collect();
                (img, scores[rng.random_range(0..scores.len())], ious)
            })
            .collect();
        let scored: Vec<Scored<Vec<f64>>> = preds
            .iter()
            .enumerate()
            .map(|(id, (img, s, ious))| Scored { image: *img, id, score: *s, item: ious.clone() })
            .collect();
        let gt_idx: Vec<Vec<usize>> = gts.iter().map(|&n| (0..n).collect()).collect();
        for thr in [0.5, 0.75, 0.95] {
            let got = average_precision(&scored, &gt_idx, thr, |p, g| p[*g]).unwrap();
            let want = brute_force_ap(&gts, &preds, thr);
            ensure!((got - want).abs() < 1e-12, "{gts:?} {preds:?} at {thr}: {got} vs {want}");
        }
        fixtures += 1;
    }

    // perfect predictions on real records
    let records = generate_synthetic_shapes(8, 64, 3, 4, 7).unwrap();
    let cats = RunConfig::desk().synthetic_categories().unwrap();
    let perfect: Vec<Vec<InstancePrediction>> = records
        .iter()
        .map(|r| {
            r.annotations
                .iter()
                .map(|a| InstancePrediction {
                    bbox: a.bbox,
                    category_id: a.category_id,
                    cls_score: 0.9,
                    mask_iou_score: 0.9,
                    mask_probs: Vec::new(),
                    mask: a.mask.clone(),
                })
                .collect()
        })
        .collect();
    let res = evaluate_predictions(&records, &perfect, &cats).map_err(|e| e.to_string())?;
    ensure!(res.map_box == 1.0 && res.map_mask == 1.0, "perfect predictions give {} / {}", res.map_box, res.map_mask);

    // a noisy set: mAP is the mean of the ten thresholds
    let mut noisy = perfect.clone();
    for (i, preds) in noisy.iter_mut().enumerate() {
        for (j, p) in preds.iter_mut().enumerate() {
            let s = 1.0 + 0.1 * ((i + j) % 3) as f32;
            p.bbox = BBox::new(p.bbox.x1, p.bbox.y1, p.bbox.x1 + s * p.bbox.width(), p.bbox.y2);
            p.cls_score = 0.3 + 0.1 * ((i * 7 + j) % 5) as f32;
        }
    }
    let res = evaluate_predictions(&records, &noisy, &cats).unwrap();
    let mean = res.per_threshold.iter().map(|t| t.box_ap).sum::<f64>() / res.per_threshold.len() as f64;
    ensure!(res.per_threshold.len() == 10, "{} thresholds", res.per_threshold.len());
    ensure!((mean - res.map_box).abs() < 1e-12, "mAP {} vs threshold mean {mean}", res.map_box);
    Ok(format!("{fixtures} fixtures x 3 thresholds match enumeration; perfect mAP 1.0; noisy mAP {:.4} = threshold mean", res.map_box))
}

// ---------- 8, 9: desk-scale training ----------

struct SeedRun {
    seed: u64,
    dir: PathBuf,
    summary: RunSummary,
    evals: Vec<EvalPoint>,
    seconds: f64,
}

const MUTUAL_EVAL: &[&str] = &["--set", "mutual.eval_every=100", "--set", "mutual.patience=0"];

fn seed_args(seed: u64) -> Vec<String> {
    let s = seed.to_string();
    let mut v = strs(&["--seed", &s, "--synthetic-seed", &s]);
    v.extend(strs(MUTUAL_EVAL));
    v
}

fn train_seed(root: &Path, seed: u64) -> Result<SeedRun, String> {
    let dir = root.join(format!("seed{seed}"));
    let t0 = Instant::now();
    let mut args = strs(&["train", "--run-dir", &dir.display().to_string()]);
    args.extend(seed_args(seed));
    cli(&args)?;
    let seconds = t0.elapsed().as_secs_f64();
    let summary = RunSummary::load(&dir).map_err(|e| e.to_string())?;
    let evals = jsonl(&dir.join("eval.jsonl"));
    Ok(SeedRun { seed, dir, summary, evals, seconds })
}

fn criterion_8(runs: &[Result<SeedRun, String>]) -> Check {
    let mut passed = 0;
    let mut parts = Vec::new();
    for r in runs {
        match r {
            Ok(r) => {
                let b = r.summary.burnin.as_ref().unwrap();
                let m = r.summary.mutual.as_ref().unwrap();
                let gain = 100.0 * (m.best_map_mask - b.best_map_mask);
                let ok = b.best_map_mask >= 0.30 && gain >= 2.0 && r.seconds <= 4.0 * 3600.0;
                passed += ok as usize;
                parts.push(format!(
                    "seed {}: burn-in {:.4}, teacher {:.4} ({gain:+.2} AP), {:.0}s{}",
                    r.seed,
                    b.best_map_mask,
                    m.best_map_mask,
                    r.seconds,
                    if ok { "" } else { " [miss]" }
                ));
            }
            Err(e) => parts.push(format!("run failed: {e}")),
        }
    }
    let detail = format!("{passed}/3 seeds pass; {}", parts.join("; "));
    ensure!(passed >= 2, "{detail}");
    Ok(detail)
}

fn first_reaching(evals: &[EvalPoint], stage: Stage, target: f64) -> Option<usize> {
    evals.iter().find(|e| e.stage == stage && e.map_mask >= target).map(|e| e.step)
}

/// Mask-scoring-disabled run from the same burn-in checkpoint. It only needs
/// to run until the enabled run's crossing step to settle the comparison.
fn criterion_9_seed(root: &Path, r: &SeedRun) -> Result<(bool, String), String> {
    let baseline = r
        .evals
        .iter()
        .filter(|e| e.stage == Stage::Burnin)
        .last()
        .ok_or("no burn-in evaluations")?
        .map_mask;
    let Some(enabled) = first_reaching(&r.evals, Stage::Mutual, baseline) else {
        return Ok((false, format!("seed {}: enabled run never reached {baseline:.4}", r.seed)));
    };
    let dir = root.join(format!("seed{}_no_maskiou", r.seed));
    let mut args = strs(&[
        "train",
        "--stage",
        "mutual",
        "--init-from",
        &r.dir.join("best_burnin").display().to_string(),
        "--run-dir",
        &dir.display().to_string(),
        "--disable-maskiou",
        "--mutual-steps",
        &enabled.to_string(),
    ]);
    args.extend(seed_args(r.seed));
    cli(&args)?;
    let evals: Vec<EvalPoint> = jsonl(&dir.join("eval.jsonl"));
    let disabled = first_reaching(&evals, Stage::Mutual, baseline);
    let ok = disabled.is_none_or(|d| d >= enabled);
    let d = disabled.map_or_else(|| format!("not by {enabled}"), |d| d.to_string());
    Ok((ok, format!("seed {}: target {baseline:.4}, enabled at {enabled}, disabled {d}", r.seed)))
}

fn criterion_9(root: &Path, runs: &[Result<SeedRun, String>]) -> Check {
    let mut passed = 0;
    let mut parts = Vec::new();
    for r in runs.iter().flatten() {
        let (ok, msg) = criterion_9_seed(root, r)?;
        passed += ok as usize;
        parts.push(msg);
    }
    let detail = format!("{passed}/3 seeds no slower with mask scoring; {}", parts.join("; "));
    ensure!(passed >= 2, "{detail}");
    Ok(detail)
}

// ---------- 6: unsupervised loss structure ----------

fn criterion_6(root: &Path, seed1: &SeedRun) -> Check {
    let dir = root.join("smoke");
    let mut args = strs(&[
        "train",
        "--stage",
        "mutual",
        "--init-from",
        &seed1.dir.join("best_burnin").display().to_string(),
        "--run-dir",
        &dir.display().to_string(),
        "--mutual-steps",
        "100",
    ]);
    args.extend(seed_args(1));
    cli(&args)?;
    let steps: Vec<StepRecord> = jsonl(&dir.join("events.log"));
    ensure!(steps.len() == 100, "{} steps logged", steps.len());
    let mut with_unsup = 0;
    for s in &steps {
        if let Some(u) = &s.unsup {
            ensure!(u.box_reg.is_none() && u.centre.is_none(), "step {} has unsupervised box/centreness terms: {u:?}", s.step);
            with_unsup += 1;
        }
    }
    ensure!(with_unsup > 0, "no step produced unsupervised terms");
    Ok(format!("100 mutual steps, {with_unsup} with unsupervised terms, none with box or centreness"))
}

// ---------- 10: determinism ----------

fn criterion_10(root: &Path) -> Check {
    let dir = root.join("determinism");
    let mut splits = Vec::new();
    let mut corpora = Vec::new();
    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let split = dir.join(format!("split_{run}.txt"));
        cli(&strs(&["split", "--seed", "5", "--synthetic-seed", "5", "--out", &split.display().to_string()]))?;
        splits.push(fs::read(&split).unwrap());

        let data = dir.join(format!("data_{run}"));
        cli(&strs(&["gen-data", "--n", "1000", "--size", "64", "--classes", "3", "--seed", "5", "--out", &data.display().to_string()]))?;
        let mut files = vec![fs::read(data.join("annotations.json")).unwrap()];
        let mut names: Vec<PathBuf> = fs::read_dir(data.join("images")).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        files.extend(names.iter().map(|p| fs::read(p).unwrap()));
        corpora.push(files);

        let run_dir = dir.join(format!("train_{run}"));
        cli(&strs(&[
            "train", "--seed", "5", "--synthetic-seed", "5", "--run-dir", &run_dir.display().to_string(),
            "--burnin-steps", "10", "--mutual-steps", "10", "--eval-every", "10",
            "--set", "burnin.lr_drop_steps=", "--set", "data.synthetic_val_images=16",
        ]))?;
        traces.push(jsonl::<StepRecord>(&run_dir.join("events.log")));
    }
    ensure!(splits[0] == splits[1], "split manifests differ");
    ensure!(corpora[0] == corpora[1], "synthetic corpora differ");
    let in_memory = generate_synthetic_shapes(1000, 64, 3, 4, 5).unwrap();
    ensure!(in_memory == generate_synthetic_shapes(1000, 64, 3, 4, 5).unwrap(), "in-memory corpora differ");
    ensure!(traces[0].len() == 20 && traces[1].len() == 20, "expected 10 + 10 logged steps");
    let mut worst: f64 = 0.0;
    for (a, b) in traces[0].iter().zip(&traces[1]) {
        let terms = |s: &StepRecord| {
            let mut v = vec![s.total];
            v.extend(s.sup.terms().iter().map(|t| t.1.unwrap_or(0.0)));
            v.extend(s.unsup.iter().flat_map(|u| u.terms().map(|t| t.1.unwrap_or(0.0))));
            v
        };
        let (ta, tb) = (terms(a), terms(b));
        ensure!(ta.len() == tb.len(), "step {} logs different terms", a.step);
        for (x, y) in ta.iter().zip(&tb) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure!(worst <= 1e-6, "loss traces differ by {worst:e}");
    Ok(format!("split and 1000-image corpus byte-identical; 10 burn-in + 10 mutual step losses agree to {worst:.1e}"))
}

// ---------- 11: sweep ----------

fn criterion_11(root: &Path, seed1: &SeedRun) -> Check {
    let dir = root.join("sweep_tau_iou");
    let mut args = strs(&[
        "sweep",
        "--param",
        "tau_iou",
        "--values",
        "0.0,0.5,0.9",
        "--init-from",
        &seed1.dir.join("best_burnin").display().to_string(),
        "--run-dir",
        &dir.display().to_string(),
        "--mutual-steps",
        "150",
        "--eval-every",
        "75",
    ]);
    args.extend(seed_args(1));
    cli(&args)?;
    let mut reader = csv::Reader::from_path(dir.join("sweep.csv")).map_err(|e| e.to_string())?;
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    ensure!(rows.len() == 3, "{} rows", rows.len());
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let values: Vec<&str> = rows.iter().map(|r| &r[col("value")]).collect();
    ensure!(values == ["0.0", "0.5", "0.9"], "row order {values:?}");
    let plot = dir.join("sweep.svg");
    ensure!(fs::metadata(&plot).map(|m| m.len() > 0).unwrap_or(false), "no plot at {}", plot.display());
    let rates: Vec<f64> = rows.iter().map(|r| r[col("mask_pass_rate")].parse().unwrap_or(f64::NAN)).collect();
    ensure!(rates.iter().all(|r| r.is_finite()), "missing mask pass rates {rates:?}");
    ensure!(rates.windows(2).all(|w| w[0] >= w[1]), "mask-gate pass rates not non-increasing: {rates:?}");
    let aps: Vec<String> = rows.iter().map(|r| format!("{:.4}", r[col("mask_ap")].parse::<f64>().unwrap())).collect();
    Ok(format!("3-row CSV and plot; mask-gate pass rates {rates:.3?}; mask AP {}", aps.join("/")))
}

#[test]
fn acceptance() {
    let root = work_dir();
    let mut suite = Suite { lines: Vec::new(), failed: Vec::new() };
    emit("acceptance: fast criteria");
    suite.run(1, "centreness formula", false, criterion_1);
    suite.run(2, "SAG-Mask oracle", false, criterion_2);
    suite.run(3, "loss gradients", false, criterion_3);
    suite.run(4, "EMA law", false, criterion_4);
    suite.run(5, "gating exactness", false, criterion_5);
    suite.run(7, "AP oracle", false, criterion_7);
    suite.run(10, "determinism", false, || criterion_10(&root));

    emit("acceptance: desk-scale training, three seeds (about 25 minutes)");
    let runs: Vec<Result<SeedRun, String>> = [1, 2, 3]
        .into_iter()
        .map(|s| {
            let r = train_seed(&root, s);
            match &r {
                Ok(r) => emit(&format!("  seed {s} trained in {:.0}s", r.seconds)),
                Err(e) => emit(&format!("  seed {s} failed: {e}")),
            }
            r
        })
        .collect();
    suite.run(8, "desk-scale end to end", false, || criterion_8(&runs));
    suite.run(9, "convergence speed (soft)", true, || criterion_9(&root, &runs));
    let seed1 = runs.iter().flatten().find(|r| r.seed == 1);
    suite.run(6, "unsupervised loss structure", false, || criterion_6(&root, seed1.ok_or("seed 1 did not train")?));
    suite.run(11, "sweep machinery", false, || criterion_11(&root, seed1.ok_or("seed 1 did not train")?));

    suite.lines.sort_by_key(|l| l.0);
    emit("acceptance summary:");
    for (_, l) in &suite.lines {
        emit(&format!("  {l}"));
    }
    let report: String = suite.lines.iter().map(|(_, l)| format!("{l}\n")).collect();
    let _ = fs::write(root.join("report.txt"), report);
    assert!(suite.failed.is_empty(), "criteria failed: {:?}", suite.failed);
}
