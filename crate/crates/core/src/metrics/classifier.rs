//! Two-class logistic classifier over simple image statistics, used to
//! produce class probabilities for synthetic images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GrayImage;
use crate::synth::Label;

use super::inception::ProbRecord;

const BLOCK: usize = 8;
const FEATURES: usize = 3;

/// Mean, variance and the largest `8x8` block mean above the image mean.
pub fn image_statistics(image: &GrayImage) -> [f64; FEATURES] {
    let (h, w) = image.dims();
    let n = (h * w) as f64;
    let mean = image.data().iter().sum::<f64>() / n;
    let var = image.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut contrast = 0.0f64;
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            let (mut s, mut c) = (0.0, 0usize);
            for y in by..(by + BLOCK).min(h) {
                for x in bx..(bx + BLOCK).min(w) {
                    s += image.get(y, x);
                    c += 1;
                }
            }
            contrast = contrast.max(s / c as f64 - mean);
        }
    }
    [mean, var, contrast]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClassifier {
    /// Feature standardization.
    shift: [f64; FEATURES],
    scale: [f64; FEATURES],
    weights: [f64; FEATURES],
    bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ToyClassifier {
    /// Full-batch gradient descent on the logistic loss from zero weights.
    pub fn fit(images: &[(&GrayImage, Label)], iterations: usize, lr: f64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::arg("classifier needs training images"));
        }
        let feats: Vec<[f64; FEATURES]> = images.iter().map(|(im, _)| image_statistics(im)).collect();
        let n = feats.len() as f64;
        let mut shift = [0.0; FEATURES];
        let mut scale = [1.0; FEATURES];
        for k in 0..FEATURES {
            shift[k] = feats.iter().map(|f| f[k]).sum::<f64>() / n;
            let var = feats.iter().map(|f| (f[k] - shift[k]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                scale[k] = var.sqrt();
            }
        }
        let mut clf = Self {
            shift,
            scale,
            weights: [0.0; FEATURES],
            bias: 0.0,
        };
        let xs: Vec<[f64; FEATURES]> = feats.iter().map(|f| clf.standardize(f)).collect();
        let ys: Vec<f64> = images
            .iter()
            .map(|(_, l)| f64::from(u8::from(*l == Label::Polyp)))
            .collect();
        for _ in 0..iterations {
            let mut gw = [0.0; FEATURES];
            let mut gb = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                let r = sigmoid(clf.logit(x)) - y;
                for k in 0..FEATURES {
                    gw[k] += r * x[k] / n;
                }
                gb += r / n;
            }
            for k in 0..FEATURES {
                clf.weights[k] -= lr * gw[k];
            }
            clf.bias -= lr * gb;
        }
        Ok(clf)
    }

    fn standardize(&self, f: &[f64; FEATURES]) -> [f64; FEATURES] {
        std::array::from_fn(|k| (f[k] - self.shift[k]) / self.scale[k])
    }

    fn logit(&self, x: &[f64; FEATURES]) -> f64 {
        self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Probabilities ordered `[polyp, normal]`.
    pub fn predict(&self, image: &GrayImage) -> [f64; 2] {
        let z = self.logit(&self.standardize(&image_statistics(image)));
        let p = sigmoid(z);
        [p, 1.0 - p]
    }

    pub fn prob_record(&self, image_id: &str, image: &GrayImage) -> Result<ProbRecord> {
        ProbRecord::new(image_id, self.predict(image).to_vec())
    }
}
