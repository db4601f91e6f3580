//! Fixed latent codec: every 8x8 pixel block becomes the four lowest
//! coefficients of its orthonormal 2-D DCT-II, giving an `H/8 x W/8 x 4`
//! latent. Decoding inverts the transform with the discarded coefficients
//! set to zero, so `encode . decode` is the identity on latents.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, GrayImage};
use crate::tensor::Tensor3;

pub const BLOCK: usize = 8;
pub const LATENT_CHANNELS: usize = 4;

/// Retained DCT coefficients `(vertical, horizontal)` frequency, in channel order.
pub const RETAINED: [(usize, usize); LATENT_CHANNELS] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// `4 x H/8 x W/8` block-DCT coefficients.
pub type Latent = Tensor3;

/// Latent-grid mask, `H/8 x W/8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentMask(pub BinaryMask);

impl LatentMask {
    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0.get(y, x)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The mask as a one-channel tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_fn(
            1,
            self.height(),
            self.width(),
            |_, y, x| {
                if self.get(y, x) {
                    1.0
                } else {
                    0.0
                }
            },
        )
    }
}

/// 1-D orthonormal DCT-II basis, `basis()[k][n]`.
fn basis() -> &'static [[f64; BLOCK]; 2] {
    static B: OnceLock<[[f64; BLOCK]; 2]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; BLOCK]; 2];
        for (k, row) in b.iter_mut().enumerate() {
            let alpha = if k == 0 {
                (1.0 / BLOCK as f64).sqrt()
            } else {
                (2.0 / BLOCK as f64).sqrt()
            };
            for (n, v) in row.iter_mut().enumerate() {
                *v = alpha * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * BLOCK) as f64).cos();
            }
        }
        b
    })
}

/// Exact `(min, max)` of channel `ch` over all blocks with pixels in `[0, 1]`.
pub fn coefficient_range(ch: usize) -> (f64, f64) {
    let b = basis();
    let (u, v) = RETAINED[ch];
    let (mut lo, mut hi) = (0.0, 0.0);
    for dy in 0..BLOCK {
        for dx in 0..BLOCK {
            let c = b[u][dy] * b[v][dx];
            if c > 0.0 {
                hi += c;
            } else {
                lo += c;
            }
        }
    }
    (lo, hi)
}

fn check_divisible(h: usize, w: usize, what: &str) -> Result<()> {
    if h == 0 || w == 0 || h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::arg(format!(
            "{what} dims {h}x{w} must be positive multiples of {BLOCK}"
        )));
    }
    Ok(())
}

pub fn encode(image: &GrayImage) -> Result<Latent> {
    let (h, w) = image.dims();
    check_divisible(h, w, "image")?;
    let b = basis();
    let (gh, gw) = (h / BLOCK, w / BLOCK);
    let mut out = Tensor3::zeros(LATENT_CHANNELS, gh, gw);
    for by in 0..gh {
        for bx in 0..gw {
            for (ch, &(u, v)) in RETAINED.iter().enumerate() {
                let mut acc = 0.0;
                for dy in 0..BLOCK {
                    let row = (by * BLOCK + dy) * w + bx * BLOCK;
                    let px = &image.data()[row..row + BLOCK];
                    let inner: f64 = px.iter().zip(&b[v]).map(|(p, c)| p * c).sum();
                    acc += b[u][dy] * inner;
                }
                out.set(ch, by, bx, acc);
            }
        }
    }
    Ok(out)
}

/// Inverse transform without clamping; values may leave `[0, 1]`.
pub fn decode_unclamped(latent: &Latent) -> Result<Vec<f64>> {
    if latent.channels() != LATENT_CHANNELS {
        return Err(Error::arg(format!(
            "latent has {} channels, expected {LATENT_CHANNELS}",
            latent.channels()
        )));
    }
    let b = basis();
    let (gh, gw) = (latent.height(), latent.width());
    let (h, w) = (gh * BLOCK, gw * BLOCK);
    let mut px = vec![0.0; h * w];
    for by in 0..gh {
        for bx in 0..gw {
            let coefs: [f64; LATENT_CHANNELS] = std::array::from_fn(|ch| latent.get(ch, by, bx));
            for dy in 0..BLOCK {
                for dx in 0..BLOCK {
                    let v: f64 = RETAINED
                        .iter()
                        .zip(coefs)
                        .map(|(&(u, vv), c)| c * b[u][dy] * b[vv][dx])
                        .sum();
                    px[(by * BLOCK + dy) * w + bx * BLOCK + dx] = v;
                }
            }
        }
    }
    Ok(px)
}

/// Inverse block DCT clamped to `[0, 1]`.
pub fn decode(latent: &Latent) -> Result<GrayImage> {
    let px = decode_unclamped(latent)?;
    GrayImage::new(
        latent.height() * BLOCK,
        latent.width() * BLOCK,
        px.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

/// Max-pools the mask over 8x8 blocks: a latent cell is set iff any pixel of
/// its block is.
pub fn downsample_mask(mask: &BinaryMask) -> Result<LatentMask> {
    let (h, w) = mask.dims();
    check_divisible(h, w, "mask")?;
    let (gh, gw) = (h / BLOCK, w / BLOCK);
    let mut out = BinaryMask::zeros(gh, gw);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                out.set(y / BLOCK, x / BLOCK, true);
            }
        }
    }
    Ok(LatentMask(out))
}

/// Masked conditioning image `(1 - M) * I`.
pub fn masked_image(image: &GrayImage, mask: &BinaryMask) -> Result<GrayImage> {
    if image.dims() != mask.dims() {
        return Err(Error::arg(format!(
            "mask {:?} does not match image {:?}",
            mask.dims(),
            image.dims()
        )));
    }
    let data = image
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&p, &m)| if m { 0.0 } else { p })
        .collect();
    GrayImage::new(image.height(), image.width(), data)
}
