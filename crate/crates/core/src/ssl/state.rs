use polite_nn::Sgd;

use crate::error::{Error, Result};
use crate::model::DetectorParams;

/// Student and teacher parameters. The teacher keeps an f64 master copy so
/// that averaging with α close to 1 does not lose the small increments; its
/// f32 view is refreshed after every update.
#[derive(Clone, Debug)]
pub struct TeacherStudentState {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    teacher_master: Vec<Vec<f64>>,
    pub alpha: f64,
    pub step: usize,
    pub optimizer: Sgd,
}

/// Independent copies of `theta` as student and teacher.
pub fn init_mutual(
    theta: &DetectorParams,
    alpha: f64,
    momentum: f32,
    weight_decay: f32,
) -> Result<TeacherStudentState> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA alpha must be in [0, 1), got {alpha}")));
    }
    Ok(TeacherStudentState {
        student: theta.clone(),
        teacher: theta.clone(),
        teacher_master: theta
            .store
            .iter()
            .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
            .collect(),
        alpha,
        step: 0,
        optimizer: Sgd::new(&theta.store, momentum, weight_decay),
    })
}

impl TeacherStudentState {
    /// `θ_t ← α θ_t + (1 − α) θ_s`, element-wise; the student is untouched.
    pub fn ema_update(&mut self) -> Result<()> {
        if !self.student.compatible(&self.teacher) {
            return Err(Error::Contract(
                "teacher and student parameter namespaces differ".into(),
            ));
        }
        let a = self.alpha;
        for (i, id) in self.student.store.ids().enumerate() {
            let s = self.student.store.get(id).data();
            let master = &mut self.teacher_master[i];
            let view = self.teacher.store.get_mut(id).data_mut();
            for ((m, v), &sv) in master.iter_mut().zip(view.iter_mut()).zip(s) {
                *m = a * *m + (1.0 - a) * sv as f64;
                *v = *m as f32;
            }
        }
        Ok(())
    }

    /// Euclidean distance between the teacher's master copy and the student.
    pub fn teacher_student_distance(&self) -> f64 {
        let mut sum = 0.0;
        for (i, id) in self.student.store.ids().enumerate() {
            for (m, &s) in self.teacher_master[i].iter().zip(self.student.store.get(id).data()) {
                sum += (m - s as f64).powi(2);
            }
        }
        sum.sqrt()
    }

    /// Teacher master values in declaration order, flattened.
    pub fn teacher_master(&self) -> impl Iterator<Item = f64> + '_ {
        self.teacher_master.iter().flatten().copied()
    }
}
