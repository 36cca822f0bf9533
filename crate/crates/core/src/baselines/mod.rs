//! Training loop shared by every method, plus the EWC and GEM gradient hooks.

mod ewc;
mod gem;
mod trainer;

pub use ewc::{ewc_penalty, fisher_from_grads, EwcState};
pub use gem::{gem_project, GemMemory};
pub use trainer::{
    estimate_fisher, flatten, unflatten_into, Candidates, GradientHook, TaskTrainer, TrainConfig, TrainReport,
};
