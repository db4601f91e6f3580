//! Latent inpainting diffusion: schedule, denoiser, loss, optimizer,
//! training loop and samplers.
//!
//! Codec latents are shifted and scaled per channel before they reach the
//! denoiser, so that natural-looking content has roughly unit spread against
//! unit-variance noise.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod schedule;
pub mod train;

use crate::codec::{coefficient_range, downsample_mask, encode, masked_image, Latent, LatentMask, LATENT_CHANNELS};
use crate::error::Result;
use crate::raster::{BinaryMask, GrayImage};
use crate::tensor::Tensor3;

/// Per-channel shift and scale into model space.
const CHANNEL_OFFSET: [f64; LATENT_CHANNELS] = [4.0, 0.0, 0.0, 0.0];
// Roughly unit spread for the synthetic data: DC centered on mid-gray, the
// smaller AC terms stretched.
const CHANNEL_SCALE: [f64; LATENT_CHANNELS] = [0.5, 2.0, 2.0, 4.0];

pub fn to_model_space(z: &Latent) -> Tensor3 {
    Tensor3::from_fn(z.channels(), z.height(), z.width(), |c, y, x| {
        (z.get(c, y, x) - CHANNEL_OFFSET[c]) * CHANNEL_SCALE[c]
    })
}

pub fn from_model_space(z: &Tensor3) -> Latent {
    Tensor3::from_fn(z.channels(), z.height(), z.width(), |c, y, x| {
        z.get(c, y, x) / CHANNEL_SCALE[c] + CHANNEL_OFFSET[c]
    })
}

/// Model-space box holding the latent of every `[0, 1]` image.
pub fn model_space_bounds() -> [(f64, f64); LATENT_CHANNELS] {
    std::array::from_fn(|c| {
        let (lo, hi) = coefficient_range(c);
        (
            (lo - CHANNEL_OFFSET[c]) * CHANNEL_SCALE[c],
            (hi - CHANNEL_OFFSET[c]) * CHANNEL_SCALE[c],
        )
    })
}

/// Conditioning pair: the encoded masked image `E((1 - M) * I)` in model
/// space, and the mask resized to the latent grid.
pub fn condition(image: &GrayImage, mask: &BinaryMask) -> Result<(Tensor3, LatentMask)> {
    let masked = masked_image(image, mask)?;
    Ok((to_model_space(&encode(&masked)?), downsample_mask(mask)?))
}
