//! DDIM / DDPM inpainting samplers.
//!
//! Both walk an evenly strided subset of the training timesteps, starting
//! from pure noise, with the masked-image latent and the latent mask held
//! fixed as conditioning. After decoding, every pixel outside the mask is
//! copied back from the input image.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{DenoiserInput, DenoiserModel};
use super::schedule::Schedule;
use super::{condition, from_model_space, model_space_bounds};
use crate::codec::decode;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, GrayImage};
use crate::rng::{rng_from_seed, StageRng};
use crate::synth::Prompt;
use crate::tensor::Tensor3;

pub const DEFAULT_SAMPLING_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    /// 0 gives deterministic DDIM, 1 the ancestral DDPM posterior.
    pub eta: f64,
    /// Clamp the predicted clean latent to the range reachable by `[0, 1]`
    /// images at every step.
    pub clip_denoised: bool,
}

impl SamplerConfig {
    pub fn ddim(steps: usize) -> Self {
        Self {
            steps,
            eta: 0.0,
            clip_denoised: true,
        }
    }

    pub fn ddpm(steps: usize) -> Self {
        Self {
            steps,
            eta: 1.0,
            clip_denoised: true,
        }
    }

    pub fn for_kind(kind: SamplerKind, steps: usize) -> Self {
        match kind {
            SamplerKind::Ddim => Self::ddim(steps),
            SamplerKind::Ddpm => Self::ddpm(steps),
        }
    }
}

/// Descending timesteps `(steps-1)*r, ..., r, 0` with stride `r = T / steps`.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::arg(format!(
            "sampling steps must lie in [1, {total}], got {steps}"
        )));
    }
    let ratio = total / steps;
    Ok((0..steps).rev().map(|i| i * ratio).collect())
}

/// One generalized DDIM update from `t` to `t_prev` (`None` = the clean
/// end point, where `abar = 1`).
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    z_t: &Tensor3,
    eps: &Tensor3,
    t: usize,
    t_prev: Option<usize>,
    sched: &Schedule,
    eta: f64,
    clip_denoised: bool,
    noise: Option<&Tensor3>,
) -> Tensor3 {
    let ab = sched.alpha_bar()[t];
    let ab_prev = t_prev.map_or(1.0, |p| sched.alpha_bar()[p]);
    let mut x0 = z_t.axpby(1.0 / ab.sqrt(), eps, -((1.0 - ab) / ab).sqrt());
    if clip_denoised {
        let bounds = model_space_bounds();
        let (c, h, w) = x0.shape();
        for ch in 0..c {
            let (lo, hi) = bounds[ch];
            for y in 0..h {
                for x in 0..w {
                    x0.set(ch, y, x, x0.get(ch, y, x).clamp(lo, hi));
                }
            }
        }
    }
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = x0.axpby(ab_prev.sqrt(), eps, dir);
    if let (Some(n), true) = (noise, sigma > 0.0) {
        out = out.axpby(1.0, n, sigma);
    }
    out
}

/// Inpaints `image` inside `mask` under `prompt`.
pub fn sample(
    model: &DenoiserModel,
    image: &GrayImage,
    mask: &BinaryMask,
    prompt: Prompt,
    sched: &Schedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<GrayImage> {
    let timesteps = strided_timesteps(sched.len(), cfg.steps)?;
    if mask.dims() != image.dims() {
        return Err(Error::arg(format!(
            "mask {:?} does not match image {:?}",
            mask.dims(),
            image.dims()
        )));
    }
    if mask.is_empty() {
        return Ok(image.clone());
    }
    let (z_masked, latent_mask) = condition(image, mask)?;
    let mut rng: StageRng = rng_from_seed(seed);
    let (c, h, w) = z_masked.shape();
    let randn = |rng: &mut StageRng| Tensor3::from_fn(c, h, w, |_, _, _| rng.sample(StandardNormal));
    let mut z = randn(&mut rng);
    let mut input = DenoiserInput {
        z_t: Tensor3::zeros(c, h, w),
        z_masked,
        mask: latent_mask,
        prompt,
        t: 0,
    };
    for (i, &t) in timesteps.iter().enumerate() {
        input.t = t;
        input.z_t = z;
        let eps = model.forward(&input)?;
        let noise = (cfg.eta > 0.0).then(|| randn(&mut rng));
        z = ddim_step(
            &input.z_t,
            &eps,
            t,
            timesteps.get(i + 1).copied(),
            sched,
            cfg.eta,
            cfg.clip_denoised,
            noise.as_ref(),
        );
        if !z.is_finite() {
            return Err(Error::Numerical(format!("latent diverged at timestep {t}")));
        }
    }
    let generated = decode(&from_model_space(&z))?;
    let mut out = image.clone();
    for (i, &m) in mask.bits().iter().enumerate() {
        if m {
            out.data_mut()[i] = generated.data()[i];
        }
    }
    Ok(out)
}

/// Deterministic (`eta = 0`) sampling over `steps` strided timesteps.
pub fn ddim_sample(
    model: &DenoiserModel,
    image: &GrayImage,
    mask: &BinaryMask,
    prompt: Prompt,
    steps: usize,
    sched: &Schedule,
    seed: u64,
) -> Result<GrayImage> {
    sample(model, image, mask, prompt, sched, &SamplerConfig::ddim(steps), seed)
}

/// Ancestral sampling with fresh noise at every step.
pub fn ddpm_sample(
    model: &DenoiserModel,
    image: &GrayImage,
    mask: &BinaryMask,
    prompt: Prompt,
    steps: usize,
    sched: &Schedule,
    seed: u64,
) -> Result<GrayImage> {
    sample(model, image, mask, prompt, sched, &SamplerConfig::ddpm(steps), seed)
}
