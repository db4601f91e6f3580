//! Small convolutional noise predictor with hand-written reverse-mode
//! gradients.
//!
//! ```text
//! x  = [z_t (4) | z_masked (4) | m (1)]                    9 x H x W
//! h1 = conv3x3(x) + b1 + Wt * temb(t) + bt + prompt[c]     hidden
//! h2 = conv3x3(silu(h1)) + b2                              hidden
//! y  = conv3x3(silu(h2)) + b3                              4
//! ```
//!
//! All parameters live in one flat vector; [`ParamLayout`] names the views.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{LatentMask, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::synth::Prompt;
use crate::tensor::Tensor3;

pub const IN_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;
pub const OUT_CHANNELS: usize = LATENT_CHANNELS;
const K: usize = 3;
const KK: usize = K * K;
const PROMPTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelArch {
    pub hidden: usize,
    /// Width of the sinusoidal timestep embedding; even.
    pub time_dim: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        Self {
            hidden: 32,
            time_dim: 8,
        }
    }
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time embedding width must be positive and even".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let h = self.hidden;
        let sizes = [
            h * IN_CHANNELS * KK,
            h,
            h * h * KK,
            h,
            OUT_CHANNELS * h * KK,
            OUT_CHANNELS,
            h * self.time_dim,
            h,
            PROMPTS * h,
        ];
        let mut start = 0;
        let r: [Range<usize>; 9] = std::array::from_fn(|i| {
            let range = start..start + sizes[i];
            start += sizes[i];
            range
        });
        let [conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b, time_w, time_b, prompt] = r;
        ParamLayout {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            conv3_w,
            conv3_b,
            time_w,
            time_b,
            prompt,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().prompt.end
    }
}

/// Ranges of each named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    /// `[hidden][9][3][3]`
    pub conv1_w: Range<usize>,
    pub conv1_b: Range<usize>,
    /// `[hidden][hidden][3][3]`
    pub conv2_w: Range<usize>,
    pub conv2_b: Range<usize>,
    /// `[4][hidden][3][3]`
    pub conv3_w: Range<usize>,
    pub conv3_b: Range<usize>,
    /// `[hidden][time_dim]`
    pub time_w: Range<usize>,
    pub time_b: Range<usize>,
    /// `[2][hidden]`, rows in [`Prompt::index`] order.
    pub prompt: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: ModelArch,
    params: Vec<f64>,
}

/// Conditioning for one noise prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    pub z_t: Tensor3,
    pub z_masked: Tensor3,
    pub mask: LatentMask,
    pub prompt: Prompt,
    pub t: usize,
}

impl DenoiserInput {
    fn stacked(&self) -> Result<Tensor3> {
        if self.z_t.channels() != LATENT_CHANNELS {
            return Err(Error::arg(format!(
                "noisy latent has {} channels, expected {LATENT_CHANNELS}",
                self.z_t.channels()
            )));
        }
        self.z_t.check_shape(&self.z_masked, "masked-image latent")?;
        if (self.mask.height(), self.mask.width()) != (self.z_t.height(), self.z_t.width()) {
            return Err(Error::arg(format!(
                "latent mask {}x{} does not match latent {}x{}",
                self.mask.height(),
                self.mask.width(),
                self.z_t.height(),
                self.z_t.width()
            )));
        }
        Tensor3::concat_channels(&[&self.z_t, &self.z_masked, &self.mask.to_tensor()])
    }
}

/// Intermediate activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor3,
    temb: Vec<f64>,
    prompt: Prompt,
    h1: Tensor3,
    a1: Tensor3,
    h2: Tensor3,
    a2: Tensor3,
}

/// Sinusoidal embedding of `t` with frequencies `pi * 2^k / 1000`, so every
/// component varies smoothly over the default 1000-step schedule.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let arg = t as f64 * std::f64::consts::PI * (1u64 << k) as f64 / 1000.0;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Same-padded 3x3 convolution; `weight` is `[out][in][3][3]`.
fn conv3x3(input: &Tensor3, weight: &[f64], bias: &[f64], out_ch: usize) -> Tensor3 {
    let (in_ch, h, w) = input.shape();
    let mut out = Tensor3::zeros(out_ch, h, w);
    let od = out.data_mut();
    let id = input.data();
    for o in 0..out_ch {
        let plane = &mut od[o * h * w..(o + 1) * h * w];
        plane.fill(bias[o]);
        for i in 0..in_ch {
            let kern = &weight[(o * in_ch + i) * KK..(o * in_ch + i + 1) * KK];
            let src = &id[i * h * w..(i + 1) * h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let wv = kern[ky * K + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut plane[y * w..(y + 1) * w];
                        for x in 0..w {
                            let sx = x as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                drow[x] += wv * srow[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients of [`conv3x3`] into `gw`/`gb` and,
/// when asked, returns the gradient with respect to the input.
fn conv3x3_backward(
    input: &Tensor3,
    weight: &[f64],
    dout: &Tensor3,
    gw: &mut [f64],
    gb: &mut [f64],
    want_input_grad: bool,
) -> Option<Tensor3> {
    let (in_ch, h, w) = input.shape();
    let out_ch = dout.channels();
    let mut din = want_input_grad.then(|| Tensor3::zeros(in_ch, h, w));
    let id = input.data();
    for o in 0..out_ch {
        let g = dout.plane(o);
        gb[o] += g.iter().sum::<f64>();
        for i in 0..in_ch {
            let src = &id[i * h * w..(i + 1) * h * w];
            let base = (o * in_ch + i) * KK;
            for ky in 0..K {
                for kx in 0..K {
                    let mut acc = 0.0;
                    let wv = weight[base + ky * K + kx];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let si = sy as usize * w + sx as usize;
                            let gv = g[y * w + x];
                            acc += gv * src[si];
                            if let Some(d) = din.as_mut() {
                                d.data_mut()[i * h * w + si] += gv * wv;
                            }
                        }
                    }
                    gw[base + ky * K + kx] += acc;
                }
            }
        }
    }
    din
}

impl DenoiserModel {
    pub fn zeros(arch: ModelArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            params: vec![0.0; arch.param_count()],
            arch,
        })
    }

    /// Fan-in uniform initialisation for weights and biases, small Gaussian
    /// rows for the prompt table.
    pub fn init(arch: ModelArch, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        let mut rng = rng_from_seed(seed);
        let l = arch.layout();
        let h = arch.hidden;
        let groups = [
            (l.conv1_w.start..l.conv1_b.end, IN_CHANNELS * KK),
            (l.conv2_w.start..l.conv2_b.end, h * KK),
            (l.conv3_w.start..l.conv3_b.end, h * KK),
            (l.time_w.start..l.time_b.end, arch.time_dim),
        ];
        for (range, fan_in) in groups {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut m.params[range] {
                *p = rng.random_range(-bound..bound);
            }
        }
        for p in &mut m.params[l.prompt.clone()] {
            *p = 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        Ok(m)
    }

    pub fn from_params(arch: ModelArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::arg(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> ModelArch {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, input: &DenoiserInput) -> Result<Tensor3> {
        self.forward_cached(input).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, input: &DenoiserInput) -> Result<(Tensor3, ForwardCache)> {
        let x = input.stacked()?;
        let l = self.arch.layout();
        let hid = self.arch.hidden;
        let p = &self.params;
        let temb = timestep_embedding(input.t, self.arch.time_dim);

        let mut h1 = conv3x3(&x, &p[l.conv1_w.clone()], &p[l.conv1_b.clone()], hid);
        let tw = &p[l.time_w.clone()];
        let tb = &p[l.time_b.clone()];
        let prow = &p[l.prompt.clone()][input.prompt.index() * hid..(input.prompt.index() + 1) * hid];
        let n = x.height() * x.width();
        for c in 0..hid {
            let shift: f64 = tb[c]
                + prow[c]
                + tw[c * self.arch.time_dim..(c + 1) * self.arch.time_dim]
                    .iter()
                    .zip(&temb)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            for v in &mut h1.data_mut()[c * n..(c + 1) * n] {
                *v += shift;
            }
        }
        let a1 = map(&h1, silu);
        let h2 = conv3x3(&a1, &p[l.conv2_w.clone()], &p[l.conv2_b.clone()], hid);
        let a2 = map(&h2, silu);
        let y = conv3x3(&a2, &p[l.conv3_w.clone()], &p[l.conv3_b.clone()], OUT_CHANNELS);
        Ok((
            y,
            ForwardCache {
                input: x,
                temb,
                prompt: input.prompt,
                h1,
                a1,
                h2,
                a2,
            },
        ))
    }

    /// Adds `d(loss)/d(params)` to `grads`, given `d(loss)/d(output)`.
    pub fn backward_into(&self, cache: &ForwardCache, dout: &Tensor3, grads: &mut [f64]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::arg("gradient buffer length differs from parameter count"));
        }
        if dout.shape() != (OUT_CHANNELS, cache.a2.height(), cache.a2.width()) {
            return Err(Error::arg("output gradient shape does not match the recorded pass"));
        }
        let l = self.arch.layout();
        let hid = self.arch.hidden;
        let td = self.arch.time_dim;
        let p = &self.params;

        let da2 = {
            let (gw, gb) = split_pair(grads, &l.conv3_w, &l.conv3_b);
            conv3x3_backward(&cache.a2, &p[l.conv3_w.clone()], dout, gw, gb, true).unwrap()
        };
        let dh2 = zip_map(&da2, &cache.h2, |g, h| g * silu_grad(h));
        let da1 = {
            let (gw, gb) = split_pair(grads, &l.conv2_w, &l.conv2_b);
            conv3x3_backward(&cache.a1, &p[l.conv2_w.clone()], &dh2, gw, gb, true).unwrap()
        };
        let dh1 = zip_map(&da1, &cache.h1, |g, h| g * silu_grad(h));
        {
            let (gw, gb) = split_pair(grads, &l.conv1_w, &l.conv1_b);
            conv3x3_backward(&cache.input, &p[l.conv1_w.clone()], &dh1, gw, gb, false);
        }
        // per-channel shift: time projection and prompt row
        let prow = l.prompt.start + cache.prompt.index() * hid;
        for c in 0..hid {
            let g: f64 = dh1.plane(c).iter().sum();
            grads[l.time_b.start + c] += g;
            grads[prow + c] += g;
            for (k, e) in cache.temb.iter().enumerate() {
                grads[l.time_w.start + c * td + k] += g * e;
            }
        }
        Ok(())
    }
}

/// Noise prediction `eps_theta([z_t, z_masked, m], prompt, t)`.
pub fn denoise(
    model: &DenoiserModel,
    z_t: &Tensor3,
    z_masked: &Tensor3,
    mask: &LatentMask,
    prompt: Prompt,
    t: usize,
) -> Result<Tensor3> {
    model.forward(&DenoiserInput {
        z_t: z_t.clone(),
        z_masked: z_masked.clone(),
        mask: mask.clone(),
        prompt,
        t,
    })
}

fn map(t: &Tensor3, f: impl Fn(f64) -> f64) -> Tensor3 {
    let (c, h, w) = t.shape();
    Tensor3::from_vec(c, h, w, t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip_map(a: &Tensor3, b: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Tensor3 {
    let (c, h, w) = a.shape();
    Tensor3::from_vec(c, h, w, a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}

/// Disjoint mutable views of a weight range and the bias range that follows it.
fn split_pair<'a>(g: &'a mut [f64], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(w.end, b.start);
    let (head, tail) = g[w.start..b.end].split_at_mut(w.len());
    (head, tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::BinaryMask;
    use crate::synth::Label;
    use rand_distr::StandardNormal;

    fn random_input(seed: u64, h: usize, w: usize) -> DenoiserInput {
        let mut rng = rng_from_seed(seed);
        let mut randn = |c| Tensor3::from_fn(c, h, w, |_, _, _| rng.sample(StandardNormal));
        let z_t = randn(4);
        let z_masked = randn(4);
        let bits = (0..h * w).map(|i| i % 3 == 0).collect();
        DenoiserInput {
            z_t,
            z_masked,
            mask: LatentMask(BinaryMask::from_bits(h, w, bits).unwrap()),
            prompt: Label::Polyp,
            t: 321,
        }
    }

    #[test]
    fn default_arch_has_nine_input_channels() {
        let arch = ModelArch::default();
        let l = arch.layout();
        assert_eq!(l.conv1_w.len(), 32 * 9 * 9);
        assert_eq!(l.conv3_w.len(), 4 * 32 * 9);
        assert_eq!(arch.param_count(), l.prompt.end);
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = DenoiserModel::zeros(ModelArch::default()).unwrap();
        let y = m.forward(&random_input(1, 4, 4)).unwrap();
        assert_eq!(y.shape(), (4, 4, 4));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = DenoiserModel::init(ModelArch::default(), 5).unwrap();
        let x = random_input(2, 4, 4);
        let a = m.forward(&x).unwrap();
        let b = DenoiserModel::init(ModelArch::default(), 5)
            .unwrap()
            .forward(&x)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_input_channel_is_wired() {
        let m = DenoiserModel::init(ModelArch::default(), 6).unwrap();
        let x = random_input(3, 4, 4);
        let base = m.forward(&x).unwrap();
        for c in 0..IN_CHANNELS {
            let mut xp = x.clone();
            match c {
                0..=3 => xp.z_t.set(c, 1, 2, x.z_t.get(c, 1, 2) + 0.5),
                4..=7 => xp.z_masked.set(c - 4, 1, 2, x.z_masked.get(c - 4, 1, 2) + 0.5),
                _ => {
                    let v = xp.mask.0.get(1, 2);
                    xp.mask.0.set(1, 2, !v);
                }
            }
            assert_ne!(m.forward(&xp).unwrap(), base, "channel {c}");
        }
        let mut xp = x.clone();
        xp.prompt = Label::Normal;
        assert_ne!(m.forward(&xp).unwrap(), base);
        xp = x.clone();
        xp.t = 10;
        assert_ne!(m.forward(&xp).unwrap(), base);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let m = DenoiserModel::init(ModelArch::default(), 0).unwrap();
        let mut x = random_input(0, 4, 4);
        x.z_masked = Tensor3::zeros(4, 4, 2);
        assert!(m.forward(&x).is_err());
        let mut x = random_input(0, 4, 4);
        x.mask = LatentMask(BinaryMask::zeros(2, 2));
        assert!(m.forward(&x).is_err());
    }

    #[test]
    fn unused_prompt_row_gets_no_gradient() {
        let arch = ModelArch { hidden: 4, time_dim: 4 };
        let m = DenoiserModel::init(arch, 1).unwrap();
        let x = random_input(4, 3, 3);
        let (_, cache) = m.forward_cached(&x).unwrap();
        let dout = Tensor3::from_fn(4, 3, 3, |c, y, xx| (c + y + xx) as f64 * 0.1 - 0.2);
        let mut g = vec![0.0; arch.param_count()];
        m.backward_into(&cache, &dout, &mut g).unwrap();
        let l = arch.layout();
        let normal_row = l.prompt.start + Label::Normal.index() * 4..l.prompt.start + Label::Normal.index() * 4 + 4;
        assert!(g[normal_row].iter().all(|&v| v == 0.0));
        assert!(g[l.conv1_w.clone()].iter().any(|&v| v != 0.0));
    }
}
