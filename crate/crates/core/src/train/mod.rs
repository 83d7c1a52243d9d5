//! Training runs: teacher pretraining and the student objectives.

pub mod config;
pub mod kd;
pub mod loops;

pub use config::{Mode, NegativeRelation, RunConfig, RUN_HEADER};
pub use kd::vanilla_kd_loss;
pub use loops::{
    curve_csv, distill_student, mine_dataset_pairs, train_teacher, EpochStats, TrainOutput,
};
