//! Inception Score from per-image class distributions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbRecord {
    pub image_id: String,
    pub probs: Vec<f64>,
}

impl ProbRecord {
    pub fn new(image_id: impl Into<String>, probs: Vec<f64>) -> Result<Self> {
        let r = Self {
            image_id: image_id.into(),
            probs,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.is_empty() {
            return Err(Error::arg(format!("{}: empty probability vector", self.image_id)));
        }
        if self.probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::arg(format!(
                "{}: probabilities must be finite and non-negative",
                self.image_id
            )));
        }
        let s: f64 = self.probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::arg(format!("{}: probabilities sum to {s}", self.image_id)));
        }
        Ok(())
    }
}

fn score_split(records: &[ProbRecord]) -> f64 {
    let n = records.len() as f64;
    let c = records[0].probs.len();
    // mean taken about the column minimum, so a column of equal values
    // averages to exactly that value and its KL terms vanish
    let marginal: Vec<f64> = (0..c)
        .map(|k| {
            let lo = records.iter().map(|r| r.probs[k]).fold(f64::INFINITY, f64::min);
            lo + records.iter().map(|r| r.probs[k] - lo).sum::<f64>() / n
        })
        .collect();
    let mean_kl = records
        .iter()
        .map(|r| {
            r.probs
                .iter()
                .zip(&marginal)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &q)| p * (p / q).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    mean_kl.exp()
}

/// `exp(mean_i KL(p_i || p_bar))`, averaged over `splits` contiguous chunks.
pub fn inception_score(records: &[ProbRecord], splits: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::arg("inception score needs at least one record"));
    }
    if splits == 0 || splits > records.len() {
        return Err(Error::arg(format!(
            "splits must lie in [1, {}], got {splits}",
            records.len()
        )));
    }
    let c = records[0].probs.len();
    for r in records {
        r.validate()?;
        if r.probs.len() != c {
            return Err(Error::arg(format!("{}: expected {c} classes", r.image_id)));
        }
    }
    let n = records.len();
    let total: f64 = (0..splits)
        .map(|i| score_split(&records[i * n / splits..(i + 1) * n / splits]))
        .sum();
    Ok(total / splits as f64)
}

pub fn write_prob_records(records: &[ProbRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("probability record serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_prob_records(path: &Path) -> Result<Vec<ProbRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ProbRecord = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        r.validate().map_err(|e| parse_err(i + 1, e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}
