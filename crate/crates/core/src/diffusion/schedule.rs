use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Variance-preserving noise schedule with linearly spaced betas.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl Default for Schedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::arg("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::arg(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alpha_bar = betas
        .iter()
        .scan(1.0, |acc, &b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(Schedule { betas, alpha_bar })
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// Per-step signal coefficient `sqrt(1 - beta_t)`.
    pub fn alpha(&self, t: usize) -> f64 {
        (1.0 - self.betas[t]).sqrt()
    }

    /// Per-step noise coefficient `sqrt(beta_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.betas[t].sqrt()
    }

    /// `sqrt(1 - abar_t)`, the noise coefficient of the closed-form jump.
    pub fn noise_level(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok((1.0 - self.alpha_bar[t]).sqrt())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::arg(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }
}

/// Closed-form jump `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`, equal in
/// law to `t + 1` applications of `z <- alpha z + sigma eps`.
pub fn forward_diffuse(z0: &Tensor3, t: usize, eps: &Tensor3, sched: &Schedule) -> Result<Tensor3> {
    sched.check_t(t)?;
    z0.check_shape(eps, "noise")?;
    let ab = sched.alpha_bar[t];
    Ok(z0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt()))
}
