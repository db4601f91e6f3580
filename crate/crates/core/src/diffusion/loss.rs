//! Noise-prediction objective with the lesion-guided term:
//!
//! ```text
//! L_mse   = mean (eps - pred)^2
//! L_lg    = mean (m*eps - m*pred)^2        (mean over all entries)
//! L_total = L_mse + lambda * L_lg
//! ```

use serde::{Deserialize, Serialize};

use super::model::{DenoiserInput, DenoiserModel, ForwardCache};
use crate::codec::LatentMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub mse: f64,
    pub lesion: f64,
    pub total: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(Error::arg(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}

fn check_mask(pred: &Tensor3, m: &LatentMask) -> Result<()> {
    if (m.height(), m.width()) != (pred.height(), pred.width()) {
        return Err(Error::arg("latent mask does not match prediction grid"));
    }
    Ok(())
}

pub fn compute_loss(pred: &Tensor3, eps_true: &Tensor3, m: &LatentMask, lambda: f64) -> Result<LossTerms> {
    check_lambda(lambda)?;
    pred.check_shape(eps_true, "target noise")?;
    check_mask(pred, m)?;
    let (c, h, w) = pred.shape();
    let n = (c * h * w) as f64;
    let (mut se, mut sm) = (0.0, 0.0);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = eps_true.get(ch, y, x) - pred.get(ch, y, x);
                se += d * d;
                if m.get(y, x) {
                    sm += d * d;
                }
            }
        }
    }
    let mse = se / n;
    let lesion = sm / n;
    Ok(LossTerms {
        mse,
        lesion,
        total: mse + lambda * lesion,
    })
}

/// `d L_total / d pred`.
pub fn loss_grad(pred: &Tensor3, eps_true: &Tensor3, m: &LatentMask, lambda: f64) -> Result<Tensor3> {
    check_lambda(lambda)?;
    pred.check_shape(eps_true, "target noise")?;
    check_mask(pred, m)?;
    let (c, h, w) = pred.shape();
    let n = (c * h * w) as f64;
    Ok(Tensor3::from_fn(c, h, w, |ch, y, x| {
        let d = pred.get(ch, y, x) - eps_true.get(ch, y, x);
        let weight = if m.get(y, x) { 1.0 + lambda } else { 1.0 };
        2.0 * weight * d / n
    }))
}

struct Record {
    cache: ForwardCache,
    pred: Tensor3,
    eps: Tensor3,
    mask: LatentMask,
}

/// Recorded forward passes of one batch. The batch loss is the mean of the
/// per-example losses; [`LossGraph::backward`] returns its exact gradient.
pub struct LossGraph {
    lambda: f64,
    records: Vec<Record>,
}

impl LossGraph {
    pub fn new(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            lambda,
            records: Vec::new(),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Runs the model on `input`, records the pass and returns its loss.
    pub fn record(&mut self, model: &DenoiserModel, input: &DenoiserInput, eps: &Tensor3) -> Result<LossTerms> {
        let (pred, cache) = model.forward_cached(input)?;
        let terms = compute_loss(&pred, eps, &input.mask, self.lambda)?;
        self.records.push(Record {
            cache,
            pred,
            eps: eps.clone(),
            mask: input.mask.clone(),
        });
        Ok(terms)
    }

    pub fn loss(&self) -> Result<LossTerms> {
        if self.records.is_empty() {
            return Err(Error::State("loss requested before any forward pass".into()));
        }
        let n = self.records.len() as f64;
        let mut acc = LossTerms::default();
        for r in &self.records {
            let t = compute_loss(&r.pred, &r.eps, &r.mask, self.lambda)?;
            acc.mse += t.mse / n;
            acc.lesion += t.lesion / n;
            acc.total += t.total / n;
        }
        Ok(acc)
    }

    /// Gradient of the mean total loss with respect to every model parameter.
    pub fn backward(&self, model: &DenoiserModel) -> Result<Vec<f64>> {
        if self.records.is_empty() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        let n = self.records.len() as f64;
        let mut grads = vec![0.0; model.params().len()];
        for r in &self.records {
            let dout = loss_grad(&r.pred, &r.eps, &r.mask, self.lambda)?.scale(1.0 / n);
            model.backward_into(&r.cache, &dout, &mut grads)?;
        }
        Ok(grads)
    }
}
