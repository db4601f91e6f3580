//! AdamW with decoupled weight decay.
//!
//! Bias correction is folded into the step size, as in Kingma & Ba's
//! efficient formulation:
//!
//! ```text
//! p  <- p - lr * wd * p
//! m  <- b1 m + (1 - b1) g
//! v  <- b2 v + (1 - b2) g^2
//! p  <- p - lr * sqrt(1 - b2^t) / (1 - b1^t) * m / (sqrt(v) + eps)
//! ```

use serde::{Deserialize, Serialize};

use super::loss::DEFAULT_LAMBDA;
use super::model::DenoiserModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Weight of the lesion-guided loss term.
    pub lambda: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl OptimConfig {
    /// Learning rate used for fine-tuning a large pretrained inpainting model.
    pub const PRETRAINED_LR: f64 = 1e-5;

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DenoiserModel,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub hyper: OptimConfig,
}

impl TrainState {
    pub fn new(model: DenoiserModel, hyper: OptimConfig) -> Self {
        let n = model.params().len();
        Self {
            model,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            hyper,
        }
    }
}

/// One AdamW update. Rejects the step, leaving `state` untouched, when any
/// gradient is non-finite.
pub fn optimizer_step(state: &mut TrainState, grads: &[f64]) -> Result<()> {
    let n = state.model.params().len();
    if grads.len() != n {
        return Err(Error::arg(format!(
            "gradient has {} entries, model has {n} parameters",
            grads.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at parameter {i} (step {})",
            state.step + 1
        )));
    }
    let h = state.hyper;
    let t = state.step + 1;
    let bc1 = 1.0 - h.beta1.powf(t as f64);
    let bc2 = 1.0 - h.beta2.powf(t as f64);
    let step_size = h.lr * bc2.sqrt() / bc1;
    let decay = h.lr * h.weight_decay;
    let params = state.model.params_mut();
    for i in 0..n {
        let g = grads[i];
        params[i] -= decay * params[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        params[i] -= step_size * state.m[i] / (state.v[i].sqrt() + h.eps);
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::ModelArch;

    fn single_param_state(p: f64, hyper: OptimConfig) -> TrainState {
        // hand-sized model: reuse the smallest architecture and track parameter 0
        let arch = ModelArch { hidden: 1, time_dim: 2 };
        let mut model = DenoiserModel::zeros(arch).unwrap();
        model.params_mut()[0] = p;
        TrainState::new(model, hyper)
    }

    #[test]
    fn first_step_closed_form() {
        let hyper = OptimConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = single_param_state(1.0, hyper);
        let mut g = vec![0.0; s.model.params().len()];
        g[0] = 1.0;
        optimizer_step(&mut s, &g).unwrap();
        // lr * sqrt(1-b2)/(1-b1) * 0.1 / (sqrt(0.001) + 1e-8)
        let expected = 1.0 - 0.1 * 0.001f64.sqrt() / 0.1 * 0.1 / (0.001f64.sqrt() + 1e-8);
        assert!((s.model.params()[0] - expected).abs() <= 1e-15);
        assert!((s.model.params()[0] - 0.9000000316).abs() < 1e-10);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let hyper = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = single_param_state(0.7, hyper);
        let before = s.model.clone();
        optimizer_step(&mut s, &vec![0.0; before.params().len()]).unwrap();
        assert_eq!(s.model, before);
    }

    #[test]
    fn decay_alone_shrinks_by_lr_wd_p() {
        let hyper = OptimConfig {
            lr: 0.1,
            weight_decay: 0.2,
            ..Default::default()
        };
        let mut s = single_param_state(3.0, hyper);
        let g = vec![0.0; s.model.params().len()];
        optimizer_step(&mut s, &g).unwrap();
        assert_eq!(s.model.params()[0], 3.0 - 0.1 * 0.2 * 3.0);
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut s = single_param_state(1.0, OptimConfig::default());
        let mut g = vec![0.0; s.model.params().len()];
        g[3] = f64::NAN;
        let before = s.clone();
        assert!(matches!(optimizer_step(&mut s, &g), Err(Error::Numerical(_))));
        assert_eq!(s, before);
        assert!(optimizer_step(&mut s, &[0.0]).is_err());
    }
}
