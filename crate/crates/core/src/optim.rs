//! Mini-batch parameter updates: plain SGD and ADAM.

use crate::net::NetworkParams;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient structure does not match parameters")]
    StructureMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Hyperparameters shared by both optimizers. The ADAM fields are ignored
/// under SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            ..Self::default()
        }
    }
}

/// Optimizer state: configuration plus moment accumulators and the step
/// counter. The accumulators are shaped identically to the parameters and
/// allocated lazily on the first step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first_moment: Option<NetworkParams>,
    second_moment: Option<NetworkParams>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            first_moment: None,
            second_moment: None,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. `grads` holds the gradient of the batch
    /// loss, summed the way the loss function defines it.
    pub fn step(
        &mut self,
        params: &mut NetworkParams,
        grads: &NetworkParams,
    ) -> Result<(), OptimError> {
        match self.config.kind {
            OptimizerKind::Sgd => self.sgd_step(params, grads),
            OptimizerKind::Adam => self.adam_step(params, grads),
        }
    }

    /// `theta <- theta - lr * grad - lr * weight_decay * theta`
    fn sgd_step(
        &mut self,
        params: &mut NetworkParams,
        grads: &NetworkParams,
    ) -> Result<(), OptimError> {
        let lr = self.config.learning_rate;
        let wd = self.config.weight_decay;
        for (p, g) in zip_tensors(params, grads)? {
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv + lr * wd * *pv;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Standard ADAM with bias correction. Weight decay enters as an L2 term
    /// added to the gradient before the moment updates.
    fn adam_step(
        &mut self,
        params: &mut NetworkParams,
        grads: &NetworkParams,
    ) -> Result<(), OptimError> {
        if self.first_moment.is_none() {
            self.first_moment = Some(params.zeros_like());
            self.second_moment = Some(params.zeros_like());
        }
        self.step += 1;
        let t = self.step as i32;
        let cfg = &self.config;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        let m_state = self.first_moment.as_mut().expect("allocated above");
        let v_state = self.second_moment.as_mut().expect("allocated above");
        let n_params = params.layers.len();
        if grads.layers.len() != n_params {
            return Err(OptimError::StructureMismatch);
        }
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(m_state.tensors_mut())
            .zip(v_state.tensors_mut())
        {
            if p.shape() != g.shape() {
                return Err(OptimError::StructureMismatch);
            }
            for i in 0..p.numel() {
                let grad = g.data()[i] + cfg.weight_decay * p.data()[i];
                let m_i = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * grad;
                let v_i = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * grad * grad;
                m.data_mut()[i] = m_i;
                v.data_mut()[i] = v_i;
                let m_hat = m_i / bias1;
                let v_hat = v_i / bias2;
                p.data_mut()[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

fn zip_tensors<'a>(
    params: &'a mut NetworkParams,
    grads: &'a NetworkParams,
) -> Result<Vec<(&'a mut crate::tensor::Tensor, &'a crate::tensor::Tensor)>, OptimError> {
    if params.layers.len() != grads.layers.len() {
        return Err(OptimError::StructureMismatch);
    }
    let pairs: Vec<_> = params.tensors_mut().zip(grads.tensors()).collect();
    for (p, g) in &pairs {
        if p.shape() != g.shape() {
            return Err(OptimError::StructureMismatch);
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerParams;
    use crate::tensor::Tensor;

    fn scalar_params(w: f64) -> NetworkParams {
        NetworkParams {
            layers: vec![LayerParams::Fc {
                weight: Tensor::from_vec(&[1, 1], vec![w]).unwrap(),
                bias: Tensor::zeros(&[1]),
            }],
        }
    }

    fn weight(params: &NetworkParams) -> f64 {
        match &params.layers[0] {
            LayerParams::Fc { weight, .. } => weight.data()[0],
            _ => unreachable!(),
        }
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut params = scalar_params(0.4);
        let grads = params.zeros_like();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(weight(&params), 0.4);
    }

    #[test]
    fn sgd_unit_rate_subtracts_gradient() {
        let mut params = scalar_params(1.0);
        let grads = scalar_params(0.25);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(1.0));
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(weight(&params), 0.75);
    }

    #[test]
    fn sgd_two_step_hand_trace() {
        // theta0 = 1.0; step 1: lr 0.1, g 0.5 -> 0.95
        //            step 2: lr 0.05, g -0.2 -> 0.96
        let mut params = scalar_params(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        opt.step(&mut params, &scalar_params(0.5)).unwrap();
        assert!((weight(&params) - 0.95).abs() < 1e-15);
        opt.config.learning_rate = 0.05;
        opt.step(&mut params, &scalar_params(-0.2)).unwrap();
        assert!((weight(&params) - 0.96).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_shrinks_parameters() {
        let mut params = scalar_params(1.0);
        let grads = params.zeros_like();
        let mut opt = Optimizer::new(OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::sgd(0.1)
        });
        opt.step(&mut params, &grads).unwrap();
        assert!((weight(&params) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_from_fresh_state_is_identity() {
        let mut params = scalar_params(-0.3);
        let grads = params.zeros_like();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.001));
        opt.step(&mut params, &grads).unwrap();
        // m = v = 0, update = -lr * 0 / (0 + eps) = 0
        assert_eq!(weight(&params), -0.3);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_single_step_hand_trace() {
        // gamma 1e-3, default betas, fresh state, scalar gradient 1.0:
        //   m_hat = 1, v_hat = 1  =>  update = -gamma / (1 + eps)
        let mut params = scalar_params(0.5);
        let grads = scalar_params(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.001));
        opt.step(&mut params, &grads).unwrap();
        let expected = 0.5 - 0.001 / (1.0 + 1e-8);
        assert!((weight(&params) - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_constant_gradient_update_approaches_signed_rate() {
        // with a constant gradient the moments converge to g and g^2, so the
        // per-step update magnitude approaches gamma * sign(g)
        let mut params = scalar_params(100.0);
        let grads = scalar_params(0.37);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01));
        let mut prev = weight(&params);
        let mut last_delta = 0.0;
        for _ in 0..2000 {
            opt.step(&mut params, &grads).unwrap();
            last_delta = weight(&params) - prev;
            prev = weight(&params);
        }
        assert!((last_delta + 0.01).abs() < 1e-4, "delta {}", last_delta);
    }

    #[test]
    fn structure_mismatch_is_rejected() {
        let mut params = scalar_params(0.0);
        let grads = NetworkParams {
            layers: vec![LayerParams::Fc {
                weight: Tensor::zeros(&[2, 1]),
                bias: Tensor::zeros(&[2]),
            }],
        };
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
