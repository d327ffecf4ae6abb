//! Shared mini-batch training loop with validation-based early stopping.

use crate::data::LabeledSet;
use crate::metrics::RunMetrics;
use crate::net::{EngineError, Network, NetworkParams};
use crate::optim::{OptimError, Optimizer};
use crate::rng::{stream_rng, Stream};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("no teacher logits recorded for sample index {index}")]
    MissingLogits { index: u64 },
    #[error("training set is empty")]
    EmptySet,
    #[error("{0}")]
    Config(String),
}

/// Budget and stopping rule for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping. Ignored when
    /// there is no validation set.
    pub patience: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            batch_size: 64,
            epochs: 15,
            patience: 5,
            seed: 0,
        }
    }
}

/// One gradient computation over a mini-batch. Receives the sample indices
/// of the batch (into the training set), current parameters and the dropout
/// stream; returns the batch loss and parameter gradients.
pub(crate) trait BatchObjective {
    fn compute(
        &mut self,
        indices: &[usize],
        params: &NetworkParams,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<(f64, NetworkParams), TrainError>;
}

/// Runs the epoch loop: shuffle, batch, step, validate, early-stop.
/// Returns the best-validation parameters (or the final ones when no
/// validation set is given) and the run metrics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_training(
    net: &Network,
    mut params: NetworkParams,
    optimizer: &mut Optimizer,
    n_samples: usize,
    val: Option<&LabeledSet>,
    cfg: &LoopConfig,
    objective: &mut dyn BatchObjective,
    mut metrics: RunMetrics,
) -> Result<(NetworkParams, RunMetrics), TrainError> {
    if n_samples == 0 {
        return Err(TrainError::EmptySet);
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch size must be at least 1".into()));
    }
    let start = Instant::now();
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stall = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = objective.compute(batch, &params, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, loss });
            }
            optimizer.step(&mut params, &grads)?;
            loss_sum += loss * batch.len() as f64;
        }
        let epoch_loss = loss_sum / n_samples as f64;
        metrics.epoch_train_loss.push(epoch_loss);
        match val {
            Some(val_set) if !val_set.is_empty() => {
                let err = crate::analysis::evaluate(net, &params, val_set)
                    .map_err(TrainError::Engine)?;
                metrics.epoch_val_error.push(err);
                if err < best_val {
                    best_val = err;
                    best_params = params.clone();
                    best_epoch = epoch;
                    stall = 0;
                } else {
                    stall += 1;
                    if stall >= cfg.patience {
                        break;
                    }
                }
            }
            _ => {
                metrics.epoch_val_error.push(f64::NAN);
                best_params = params.clone();
                best_epoch = epoch;
            }
        }
    }
    metrics.best_epoch = best_epoch;
    metrics.wall_s = start.elapsed().as_secs_f64();
    Ok((best_params, metrics))
}
