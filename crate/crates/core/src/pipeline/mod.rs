//! End-to-end assembly: configuration, data, training, checkpoints and the
//! deployed policy.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod train;

pub use agent::{rollout_batch, Agent, Controller, ExpertController, RandomController, RolloutResult, RolloutSpec};
pub use config::TrainConfig;
pub use data::{ActionStats, Batch, TrainData};
pub use model::{Policy, PolicyRole};
pub use train::{distill_student, train_teacher, CsvLog, Distiller, LogRow, TeacherTrainer};

#[cfg(test)]
mod tests;
