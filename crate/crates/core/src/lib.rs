//! Knowledge distillation with noisy teachers: train shallow students from a
//! deep teacher's logits, with a Gaussian logit-perturbation regularizer,
//! plus an architecture notation parser and forward-pass cost model.

pub mod analysis;
pub mod arch;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod teacher;
pub mod tensor;
pub(crate) mod trainer;

pub use trainer::{LoopConfig, TrainError};
