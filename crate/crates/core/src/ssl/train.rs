use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::pseudo::{generate_pseudo_labels, PseudoStats};
use super::runlog::RunLog;
use super::schedule::{EarlyStopper, EpochSampler, TrainingSchedule};
use super::state::{init_mutual, TeacherStudentState};
use super::step::{supervised_step, student_step, TrainConfig, UnsupSample};
use crate::data::{make_training_views, ImageRecord, TrainingViews};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::losses::LossBreakdown;
use crate::model::{Detector, DetectorParams};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Burnin,
    Mutual,
}

/// One line of `eval.jsonl`. APs are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub stage: Stage,
    /// Optimiser steps completed within the stage.
    pub step: usize,
    pub map_box: f64,
    pub map_mask: f64,
}

/// One line of `events.log`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub sup: LossBreakdown,
    /// Absent for burn-in steps and for mutual steps with λ = 0.
    pub unsup: Option<LossBreakdown>,
    pub pseudo: Option<PseudoStats>,
    pub cls_pass_rate: Option<f64>,
    pub mask_pass_rate: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the highest validation mask AP (the teacher for mutual runs).
    pub best: DetectorParams,
    pub best_step: usize,
    pub best_map_mask: f64,
    pub evals: Vec<EvalPoint>,
    pub steps: Vec<StepRecord>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// Pseudo-label statistics pooled over every logged step.
    pub fn pseudo_totals(&self) -> PseudoStats {
        let mut acc = PseudoStats::default();
        for s in self.steps.iter().filter_map(|s| s.pseudo.as_ref()) {
            acc.merge(s);
        }
        acc
    }

    /// First evaluated step whose mask AP reaches `target`.
    pub fn first_step_reaching(&self, target: f64) -> Option<usize> {
        self.evals
            .iter()
            .find(|e| e.map_mask >= target)
            .map(|e| e.step)
    }
}

/// Training data for both stages. `val` drives model selection.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub sup: &'a [ImageRecord],
    pub unsup: &'a [ImageRecord],
    pub val: &'a [ImageRecord],
}

fn views(
    records: &[ImageRecord],
    picks: &[(usize, u64)],
    seed: u64,
    cfg: &TrainConfig,
) -> Vec<TrainingViews> {
    picks
        .iter()
        .map(|&(i, epoch)| {
            let rec = &records[i];
            let mut r = rng::record_stream(seed, &rec.id, epoch);
            make_training_views(rec, &cfg.weak, &cfg.strong, &mut r)
        })
        .collect()
}

fn sup_inputs(v: Vec<TrainingViews>, cfg: &TrainConfig) -> Vec<ImageRecord> {
    v.into_iter()
        .map(|v| if cfg.sup_strong { v.strong } else { v.weak })
        .collect()
}

/// Evaluation bookkeeping shared by both stages.
struct Selector {
    stopper: EarlyStopper,
    best: Option<(DetectorParams, usize, f64)>,
    evals: Vec<EvalPoint>,
}

impl Selector {
    fn new(patience: usize) -> Self {
        Self {
            stopper: EarlyStopper::new(patience),
            best: None,
            evals: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn observe(
        &mut self,
        stage: Stage,
        step: usize,
        det: &Detector,
        params: &DetectorParams,
        data: &TrainData,
        cfg: &TrainConfig,
        log: &mut RunLog,
        best_name: &str,
    ) -> Result<EvalResult> {
        let res = evaluate(det, params, data.val, &cfg.eval_pp)?;
        let point = EvalPoint {
            stage,
            step,
            map_box: res.map_box,
            map_mask: res.map_mask,
        };
        log.eval(&point)?;
        log::info!(
            "{stage:?} step {step}: box AP {:.2}, mask AP {:.2}",
            100.0 * res.map_box,
            100.0 * res.map_mask
        );
        self.evals.push(point);
        if log.keep_checkpoints {
            log.checkpoint(&format!("{}_step_{step}", stage_name(stage)), params)?;
        }
        if self.stopper.observe(res.map_mask) {
            self.best = Some((params.clone(), step, res.map_mask));
            log.best(best_name, params)?;
        }
        Ok(res)
    }
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Burnin => "burnin",
        Stage::Mutual => "mutual",
    }
}

fn on_divergence(err: Error, log: &RunLog, params: &DetectorParams, step: usize) -> Error {
    if let Error::Divergence { .. } = err {
        match log.checkpoint(&format!("diverged_step_{step}"), params) {
            Ok(Some(p)) => log::error!("diagnostic checkpoint written to {}", p.display()),
            Ok(None) => {}
            Err(e) => log::error!("could not write diagnostic checkpoint: {e}"),
        }
    }
    err
}

fn finish(sel: Selector, steps: Vec<StepRecord>, stopped_early: bool) -> Result<TrainOutcome> {
    let (best, best_step, best_map_mask) = sel
        .best
        .ok_or_else(|| Error::Contract("training ended without an evaluation".into()))?;
    Ok(TrainOutcome {
        best,
        best_step,
        best_map_mask,
        evals: sel.evals,
        steps,
        stopped_early,
    })
}

/// Supervised-only training from `init`. The model is evaluated every
/// `eval_every` steps and once more at the end if the last step was not an
/// evaluation step; the best-mask-AP parameters are returned.
pub fn burn_in_train(
    det: &Detector,
    init: DetectorParams,
    data: &TrainData,
    schedule: &TrainingSchedule,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    cfg.validate()?;
    if data.sup.is_empty() {
        return Err(Error::Contract("burn-in needs labelled images".into()));
    }
    let seed = rng::derive_seed(cfg.seed, "burnin", 0);
    let mut params = init;
    let mut opt = polite_nn::Sgd::new(
        &params.store,
        schedule.momentum as f32,
        schedule.weight_decay as f32,
    );
    let mut sampler = EpochSampler::new(data.sup.len(), seed, "burnin-sampler");
    let mut sel = Selector::new(schedule.patience);
    let mut steps = Vec::new();
    let mut stopped = false;
    let mut step = 0;
    while step < schedule.max_steps {
        let t0 = Instant::now();
        let picks = sampler.next_batch(schedule.batch_sup);
        let batch = sup_inputs(views(data.sup, &picks, seed, cfg), cfg);
        let lr = schedule.lr_at(step);
        let sup = supervised_step(det, &mut params, &mut opt, &batch, lr, step, cfg)
            .map_err(|e| on_divergence(e, log, &params, step))?;
        let rec = StepRecord {
            stage: Stage::Burnin,
            step,
            lr,
            total: sup.total(),
            sup,
            unsup: None,
            pseudo: None,
            cls_pass_rate: None,
            mask_pass_rate: None,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log.event(&rec)?;
        steps.push(rec);
        step += 1;
        if step % schedule.eval_every == 0 {
            sel.observe(Stage::Burnin, step, det, &params, data, cfg, log, "best_burnin")?;
            if sel.stopper.should_stop() {
                stopped = true;
                break;
            }
        }
    }
    if sel.evals.last().is_none_or(|e| e.step != step) {
        sel.observe(Stage::Burnin, step, det, &params, data, cfg, log, "best_burnin")?;
    }
    finish(sel, steps, stopped)
}

/// Teacher-student training from burn-in parameters. Pseudo-labels are
/// regenerated from the current teacher every step; the teacher is what gets
/// evaluated and returned.
pub fn mutual_train(
    det: &Detector,
    theta: &DetectorParams,
    data: &TrainData,
    schedule: &TrainingSchedule,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    cfg.validate()?;
    if data.sup.is_empty() {
        return Err(Error::Contract("mutual training needs labelled images".into()));
    }
    let mut state = init_mutual(
        theta,
        cfg.ema_alpha,
        schedule.momentum as f32,
        schedule.weight_decay as f32,
    )?;
    let seed = rng::derive_seed(cfg.seed, "mutual", 0);
    let mut sup_sampler = EpochSampler::new(data.sup.len(), seed, "mutual-sup");
    let mut unsup_sampler = EpochSampler::new(data.unsup.len(), seed, "mutual-unsup");
    let mut sel = Selector::new(schedule.patience);
    let mut steps = Vec::new();
    let mut stopped = false;
    let use_unsup = cfg.weights.lambda_unsup > 0.0;
    while state.step < schedule.max_steps {
        let t0 = Instant::now();
        let sup_picks = sup_sampler.next_batch(schedule.batch_sup);
        let sup = sup_inputs(views(data.sup, &sup_picks, seed, cfg), cfg);
        let (unsup, pseudo) = if use_unsup && schedule.batch_unsup > 0 && !data.unsup.is_empty() {
            let picks = unsup_sampler.next_batch(schedule.batch_unsup);
            let (unsup, stats) = pseudo_batch(det, &state, data.unsup, &picks, seed, cfg)?;
            (unsup, Some(stats))
        } else {
            (Vec::new(), None)
        };
        let step = state.step;
        let report = student_step(det, &mut state, &sup, &unsup, schedule, cfg)
            .map_err(|e| on_divergence(e, log, &state.student, step))?;
        let rec = StepRecord {
            stage: Stage::Mutual,
            step: report.step,
            lr: report.lr,
            total: report.total,
            sup: report.sup,
            unsup: (!unsup.is_empty()).then_some(report.unsup),
            cls_pass_rate: pseudo.and_then(|p| p.cls_pass_rate()),
            mask_pass_rate: pseudo.and_then(|p| p.mask_pass_rate()),
            pseudo,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log.event(&rec)?;
        steps.push(rec);
        if state.step % schedule.eval_every == 0 {
            sel.observe(Stage::Mutual, state.step, det, &state.teacher, data, cfg, log, "best_teacher")?;
            if sel.stopper.should_stop() {
                stopped = true;
                break;
            }
        }
    }
    if sel.evals.last().is_none_or(|e| e.step != state.step) {
        sel.observe(Stage::Mutual, state.step, det, &state.teacher, data, cfg, log, "best_teacher")?;
    }
    finish(sel, steps, stopped)
}

/// Builds the unlabelled part of one batch: weak views go to the teacher,
/// strong views with the resulting pseudo-labels go to the student.
pub fn pseudo_batch(
    det: &Detector,
    state: &TeacherStudentState,
    records: &[ImageRecord],
    picks: &[(usize, u64)],
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(Vec<UnsupSample>, PseudoStats)> {
    let v = views(records, picks, seed, cfg);
    let weak: Vec<&ImageRecord> = v.iter().map(|v| &v.weak).collect();
    let geometry: Vec<_> = v.iter().map(|v| v.geometry).collect();
    let set = generate_pseudo_labels(
        det,
        &state.teacher,
        &weak,
        &geometry,
        cfg.tau_cls,
        cfg.tau_iou,
        &cfg.teacher_pp,
    )?;
    let stats = set.stats();
    let samples = v
        .into_iter()
        .zip(set.images)
        .map(|(v, labels)| UnsupSample {
            strong: v.strong,
            labels,
        })
        .collect();
    Ok((samples, stats))
}
