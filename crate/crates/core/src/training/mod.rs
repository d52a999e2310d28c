//! Optimization and the experiment protocol.

mod adam;
mod schedule;
mod stats;
mod tagging;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use schedule::{run_schedule, EpochRecord, EpochRunner, ScheduleConfig, ScheduleOutcome, SchedulePhase};
pub use stats::{mean, sample_std, summarize, welch_test, SampleSummary, WelchResult};
pub use tagging::{evaluate, multi_seed, predict_all, train_tagger, LabeledSet, RunResult, TrainSettings, TrainedTagger};

/// Global gradient-norm bound applied before every update.
pub const CLIP_NORM: f64 = 5.0;
