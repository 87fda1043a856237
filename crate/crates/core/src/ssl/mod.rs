//! Two-stage training: supervised burn-in, then an EMA teacher producing
//! gated pseudo-labels for a student trained on strong views.

mod pseudo;
mod runlog;
mod schedule;
mod state;
mod step;
mod train;

pub use pseudo::{generate_pseudo_labels, PseudoInstance, PseudoLabelSet, PseudoLabels, PseudoStats};
pub use runlog::RunLog;
pub use schedule::{EarlyStopper, EpochSampler, TrainingSchedule};
pub use state::{init_mutual, TeacherStudentState};
pub use step::{compute_step, student_step, supervised_step, StepLosses, StepReport, TrainConfig, UnsupSample};
pub use train::{burn_in_train, mutual_train, pseudo_batch, EvalPoint, Stage, StepRecord, TrainData, TrainOutcome};
