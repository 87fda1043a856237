use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub max_steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear ramp from `lr / 3` over the first steps.
    pub warmup_steps: usize,
    pub lr_drop_steps: Vec<usize>,
    pub lr_drop_factor: f64,
    pub batch_sup: usize,
    pub batch_unsup: usize,
    pub eval_every: usize,
    pub patience: usize,
}

impl TrainingSchedule {
    /// The full-scale schedule: 270k steps, drops at 210k and 250k.
    pub fn full() -> Self {
        Self {
            max_steps: 270_000,
            lr: 0.006,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 1000,
            lr_drop_steps: vec![210_000, 250_000],
            lr_drop_factor: 0.1,
            batch_sup: 16,
            batch_unsup: 16,
            eval_every: 5000,
            patience: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        if !self.lr_drop_steps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("lr_drop_steps must be strictly ascending".into()));
        }
        if self.lr_drop_steps.last().is_some_and(|&s| s >= self.max_steps) {
            return Err(Error::Config("lr_drop_steps must lie below max_steps".into()));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::Config("lr_drop_factor must be in (0, 1]".into()));
        }
        if self.batch_sup == 0 {
            return Err(Error::Config("batch_sup must be ≥ 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at (zero-based) `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self.lr_drop_steps.iter().filter(|&&s| step >= s).count();
        let mut lr = self.lr * self.lr_drop_factor.powi(drops as i32);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            lr *= 1.0 / 3.0 + (2.0 / 3.0) * t;
        }
        lr
    }

    pub fn num_evals(&self) -> usize {
        self.max_steps / self.eval_every
    }
}

/// Patience-based early stopping on a score to maximise.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_index: Option<usize>,
    seen: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_index: None,
            seen: 0,
            since_best: 0,
        }
    }

    /// Records an evaluation; returns `true` when it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.best_index = Some(self.seen);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.seen += 1;
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Zero-based index of the best evaluation so far.
    pub fn best_index(&self) -> Option<usize> {
        self.best_index
    }
}

/// Draws batches by walking seeded per-epoch permutations of `0..len`.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    len: usize,
    seed: u64,
    label: &'static str,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64, label: &'static str) -> Self {
        let mut s = Self {
            len,
            seed,
            label,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order
            .shuffle(&mut rng::stream(self.seed, self.label, self.epoch));
        self.pos = 0;
    }

    /// Next `n` items with the epoch each was drawn in.
    pub fn next_batch(&mut self, n: usize) -> Vec<(usize, u64)> {
        let mut out = Vec::with_capacity(n);
        if self.len == 0 {
            return out;
        }
        while out.len() < n {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push((self.order[self.pos], self.epoch));
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_schedule_drops() {
        let s = TrainingSchedule::full();
        s.validate().unwrap();
        assert!((s.lr_at(209_999) - 0.006).abs() < 1e-15);
        assert!((s.lr_at(210_000) - 0.0006).abs() < 1e-15);
        assert!((s.lr_at(250_000) - 0.00006).abs() < 1e-15);
    }

    #[test]
    fn early_stop_bookkeeping() {
        let mut e = EarlyStopper::new(2);
        let mut stopped_at = None;
        for (i, ap) in [10.0, 12.0, 11.0, 11.0, 13.0].into_iter().enumerate() {
            e.observe(ap);
            if e.should_stop() {
                stopped_at = Some(i);
                break;
            }
        }
        assert_eq!(stopped_at, Some(3));
        assert_eq!(e.best_index(), Some(1));
        assert_eq!(e.best(), Some(12.0));
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(5, 3, "t");
        let mut first: Vec<usize> = s.next_batch(5).into_iter().map(|(i, _)| i).collect();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert!(s.next_batch(3).iter().all(|&(_, e)| e == 1));
    }

    #[test]
    fn invalid_schedules() {
        let mut s = TrainingSchedule::full();
        s.lr_drop_steps = vec![250_000, 210_000];
        assert!(s.validate().is_err());
        let mut s = TrainingSchedule::full();
        s.lr_drop_steps = vec![300_000];
        assert!(s.validate().is_err());
    }
}
