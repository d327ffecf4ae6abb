//! Student training on teacher logits: plain L2 logit regression and the
//! noisy-teacher variant that perturbs logits with multiplicative Gaussian
//! noise, `z' = (1 + xi) . z`, on a Bernoulli-selected subset of each
//! mini-batch.
//!
//! Noise can target the precomputed teacher logits (stationary per sample),
//! the student's own live logits (non-stationary, recomputed every batch),
//! or nothing at all (the regression baseline). The noise draws come from
//! dedicated random streams, so disabling any one feature leaves every other
//! stream's draws untouched — setting `sigma = 0`, `alpha = 0` or the target
//! to `None` reproduces the baseline trajectory bit-for-bit.

use crate::arch::ArchSpec;
use crate::data::LabeledSet;
use crate::metrics::RunMetrics;
use crate::net::{EngineError, Mode, Network, NetworkParams};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{stream_rng, Stream};
use crate::teacher::LogitRecordSet;
use crate::tensor::Tensor;
use crate::trainer::{run_training, BatchObjective, LoopConfig, TrainError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseTarget {
    /// Perturb the precomputed teacher logits before the loss.
    Teacher,
    /// Perturb the student's current logits; the targets stay clean.
    Student,
    /// No perturbation: the logit-regression baseline.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSharing {
    /// An independent noise vector per selected sample.
    PerSample,
    /// One noise vector drawn per mini-batch, reused across its selected
    /// samples.
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaSchedule {
    Fixed,
    /// A fresh sigma drawn uniformly from `[lo, hi]` for every mini-batch.
    UniformRandom { lo: f64, hi: f64 },
}

/// Perturbation settings. The noise mean is always zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Standard deviation of the Gaussian noise.
    pub sigma: f64,
    /// Probability that a sample's logits are perturbed.
    pub alpha: f64,
    pub target: NoiseTarget,
    pub sharing: NoiseSharing,
    pub sigma_schedule: SigmaSchedule,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma: 0.5,
            alpha: 0.5,
            target: NoiseTarget::Teacher,
            sharing: NoiseSharing::PerSample,
            sigma_schedule: SigmaSchedule::Fixed,
        }
    }
}

impl NoiseConfig {
    pub fn baseline() -> Self {
        NoiseConfig {
            target: NoiseTarget::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(TrainError::Config(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if let SigmaSchedule::UniformRandom { lo, hi } = self.sigma_schedule {
            if !(lo >= 0.0 && hi >= lo) {
                return Err(TrainError::Config(format!(
                    "random-sigma range [{}, {}] must satisfy 0 <= lo <= hi",
                    lo, hi
                )));
            }
        }
        Ok(())
    }
}

/// The Bernoulli selection mask and the noise vectors of one mini-batch.
/// `noise[i]` has one entry per class for selected samples and is empty
/// otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationEvent {
    pub mask: Vec<bool>,
    pub noise: Vec<Vec<f64>>,
}

/// Selects each of `batch_size` samples independently with probability
/// `alpha`.
pub fn select_mask(batch_size: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..batch_size).map(|_| rng.gen::<f64>() < alpha).collect()
}

/// Draws the Gaussian noise for the selected samples of a batch. Under
/// `PerBatch` sharing one vector is generated up front (before selection, as
/// the per-batch variant of the algorithm does) and reused for every
/// selected sample.
pub fn draw_noise(
    n_classes: usize,
    sigma: f64,
    sharing: NoiseSharing,
    mask: &[bool],
    rng: &mut ChaCha8Rng,
) -> PerturbationEvent {
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n_classes)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let noise = match sharing {
        NoiseSharing::PerBatch => {
            let shared = gauss(rng);
            mask.iter()
                .map(|&sel| if sel { shared.clone() } else { Vec::new() })
                .collect()
        }
        NoiseSharing::PerSample => mask
            .iter()
            .map(|&sel| if sel { gauss(rng) } else { Vec::new() })
            .collect(),
    };
    PerturbationEvent {
        mask: mask.to_vec(),
        noise,
    }
}

/// Applies `z'_j = (1 + xi_j) * z_j` to the selected rows of a logit batch;
/// unselected rows pass through unchanged.
pub fn perturb_logits(logits: &Tensor, event: &PerturbationEvent) -> Result<Tensor, EngineError> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != event.mask.len() {
        return Err(EngineError::ShapeMismatch(format!(
            "logit batch {:?} vs mask of length {}",
            shape,
            event.mask.len()
        )));
    }
    let classes = shape[1];
    let mut out = logits.clone();
    for (i, (&sel, xi)) in event.mask.iter().zip(&event.noise).enumerate() {
        if !sel {
            continue;
        }
        if xi.len() != classes {
            return Err(EngineError::ShapeMismatch(format!(
                "noise vector for sample {} has {} entries, expected {}",
                i,
                xi.len(),
                classes
            )));
        }
        let row = &mut out.data_mut()[i * classes..(i + 1) * classes];
        for (v, &x) in row.iter_mut().zip(xi) {
            *v *= 1.0 + x;
        }
    }
    Ok(out)
}

/// `(1/2T) * sum_i ||g_i - target_i||^2` and its gradient with respect to
/// `g`, `(g - target) / T`.
pub fn logit_l2_loss(
    student_logits: &Tensor,
    targets: &Tensor,
    batch_size: usize,
) -> Result<(f64, Tensor), EngineError> {
    if student_logits.shape() != targets.shape() {
        return Err(EngineError::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            student_logits.shape(),
            targets.shape()
        )));
    }
    if batch_size == 0 {
        return Err(EngineError::ShapeMismatch(
            "batch size must be positive".into(),
        ));
    }
    let t = batch_size as f64;
    let mut grad = Tensor::zeros(student_logits.shape());
    let mut loss = 0.0;
    for ((gv, &g), &z) in grad
        .data_mut()
        .iter_mut()
        .zip(student_logits.data())
        .zip(targets.data())
    {
        let diff = g - z;
        loss += diff * diff;
        *gv = diff / t;
    }
    Ok((loss / (2.0 * t), grad))
}

/// Full configuration of one distillation run.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub student: ArchSpec,
    pub noise: NoiseConfig,
    pub optimizer: OptimizerConfig,
    /// Batch size, epoch budget, early-stopping patience and the run seed.
    pub train: LoopConfig,
    /// Recorded into the run metrics; the pipeline fills this in.
    pub fingerprint: String,
}

struct LogitObjective<'a> {
    net: &'a Network,
    set: &'a LabeledSet,
    targets: Vec<&'a [f64]>,
    noise_cfg: NoiseConfig,
    mask_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    sigma_rng: ChaCha8Rng,
}

impl LogitObjective<'_> {
    fn gather_targets(&self, indices: &[usize]) -> Tensor {
        let classes = self.net.classes();
        let mut data = Vec::with_capacity(indices.len() * classes);
        for &i in indices {
            data.extend_from_slice(self.targets[i]);
        }
        Tensor::from_vec(&[indices.len(), classes], data).expect("sized by construction")
    }
}

impl BatchObjective for LogitObjective<'_> {
    fn compute(
        &mut self,
        indices: &[usize],
        params: &NetworkParams,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<(f64, NetworkParams), TrainError> {
        let rows = indices.len();
        let sigma_eff = match self.noise_cfg.sigma_schedule {
            SigmaSchedule::Fixed => self.noise_cfg.sigma,
            SigmaSchedule::UniformRandom { lo, hi } => self.sigma_rng.gen_range(lo..=hi),
        };
        let mask = select_mask(rows, self.noise_cfg.alpha, &mut self.mask_rng);
        let event = draw_noise(
            self.net.classes(),
            sigma_eff,
            self.noise_cfg.sharing,
            &mask,
            &mut self.noise_rng,
        );
        let (batch, _) = self.set.gather(indices);
        let (student_logits, cache) =
            self.net
                .forward(params, &batch, Mode::Train, Some(dropout_rng))?;
        let targets = self.gather_targets(indices);
        let (loss, logit_grad) = match self.noise_cfg.target {
            NoiseTarget::None => logit_l2_loss(&student_logits, &targets, rows)?,
            NoiseTarget::Teacher => {
                let perturbed = perturb_logits(&targets, &event)?;
                logit_l2_loss(&student_logits, &perturbed, rows)?
            }
            NoiseTarget::Student => {
                let perturbed = perturb_logits(&student_logits, &event)?;
                let (loss, mut grad) = logit_l2_loss(&perturbed, &targets, rows)?;
                // chain rule through g' = (1 + xi) . g on selected rows
                let classes = self.net.classes();
                for (i, (&sel, xi)) in event.mask.iter().zip(&event.noise).enumerate() {
                    if sel {
                        let row = &mut grad.data_mut()[i * classes..(i + 1) * classes];
                        for (gv, &x) in row.iter_mut().zip(xi) {
                            *gv *= 1.0 + x;
                        }
                    }
                }
                (loss, grad)
            }
        };
        let grads = self.net.backward(params, &cache, &logit_grad)?;
        Ok((loss, grads))
    }
}

/// Trains a student on the cached teacher logits. Targets are looked up by
/// sample index; every index of `train` must be covered by `logit_set`.
/// Early stopping follows the validation error; when `test` is given the
/// returned metrics carry the final test error of the best checkpoint.
pub fn distill(
    cfg: &DistillConfig,
    logit_set: &LogitRecordSet,
    train: &LabeledSet,
    val: Option<&LabeledSet>,
    test: Option<&LabeledSet>,
) -> Result<(NetworkParams, RunMetrics), TrainError> {
    cfg.noise.validate()?;
    let (h, w, c) = train.sample_shape();
    let net = Network::new(cfg.student.clone(), (h, w, c))?;
    if net.classes() != logit_set.n_classes as usize {
        return Err(TrainError::Config(format!(
            "student produces {} classes but the logit cache has {}",
            net.classes(),
            logit_set.n_classes
        )));
    }
    let targets = logit_set
        .dense_by_index(train.len())
        .map_err(|index| TrainError::MissingLogits { index })?;
    let mut init_rng = stream_rng(cfg.train.seed, Stream::Init);
    let params = net.init_params(&mut init_rng);
    let mut optimizer = Optimizer::new(cfg.optimizer.clone());
    let metrics = RunMetrics::new(cfg.train.seed, cfg.fingerprint.clone());
    let mut objective = LogitObjective {
        net: &net,
        set: train,
        targets,
        noise_cfg: cfg.noise,
        mask_rng: stream_rng(cfg.train.seed, Stream::Mask),
        noise_rng: stream_rng(cfg.train.seed, Stream::Noise),
        sigma_rng: stream_rng(cfg.train.seed, Stream::Sigma),
    };
    let (best, mut metrics) = run_training(
        &net,
        params,
        &mut optimizer,
        train.len(),
        val,
        &cfg.train,
        &mut objective,
        metrics,
    )?;
    if let Some(test_set) = test {
        metrics.test_error = Some(crate::analysis::evaluate(&net, &best, test_set)?);
    }
    Ok((best, metrics))
}
