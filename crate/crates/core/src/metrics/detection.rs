//! Box-detection scoring: IoU, greedy matching, all-point AP, P/R/F1.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::raster::BBox;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = u64::from(ix) * u64::from(iy);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: [u32; 4],
    pub score: f64,
}

impl ScoredBox {
    pub fn new(b: BBox, score: f64) -> Self {
        Self {
            bbox: [b.x0, b.y0, b.x1, b.y1],
            score,
        }
    }

    pub fn rect(&self) -> BBox {
        let [x0, y0, x1, y1] = self.bbox;
        BBox::new(x0, y0, x1, y1)
    }
}

/// Predictions and ground truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    #[serde(default)]
    pub ground_truth: Vec<[u32; 4]>,
    #[serde(default)]
    pub predictions: Vec<ScoredBox>,
}

impl ImageDetections {
    pub fn validate(&self) -> Result<()> {
        for b in &self.ground_truth {
            let [x0, y0, x1, y1] = *b;
            if BBox::new(x0, y0, x1, y1).is_degenerate() {
                return Err(Error::arg(format!(
                    "{}: degenerate ground-truth box {b:?}",
                    self.image_id
                )));
            }
        }
        for p in &self.predictions {
            if p.rect().is_degenerate() {
                return Err(Error::arg(format!(
                    "{}: degenerate predicted box {:?}",
                    self.image_id, p.bbox
                )));
            }
            if !(0.0..=1.0).contains(&p.score) {
                return Err(Error::arg(format!(
                    "{}: confidence {} outside [0,1]",
                    self.image_id, p.score
                )));
            }
        }
        Ok(())
    }
}

pub type DetectionSet = Vec<ImageDetections>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores `det` at `iou_threshold`. Predictions are visited by descending
/// confidence (ties: image id, then box order) and each one claims the
/// unmatched ground-truth box of its image with the highest IoU, counting as
/// a true positive when that IoU reaches the threshold.
pub fn detection_metrics(det: &[ImageDetections], iou_threshold: f64) -> Result<DetectionMetrics> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::arg(format!(
            "IoU threshold must lie in (0,1), got {iou_threshold}"
        )));
    }
    for d in det {
        d.validate()?;
    }
    let n_gt: usize = det.iter().map(|d| d.ground_truth.len()).sum();
    if n_gt == 0 {
        return Err(Error::arg("no ground-truth boxes; recall is undefined"));
    }
    let mut order: Vec<(usize, usize)> = det
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.predictions.len()).map(move |j| (i, j)))
        .collect();
    order.sort_by(|&(ia, ja), &(ib, jb)| {
        let (pa, pb) = (&det[ia].predictions[ja], &det[ib].predictions[jb]);
        pb.score
            .total_cmp(&pa.score)
            .then_with(|| det[ia].image_id.cmp(&det[ib].image_id))
            .then_with(|| ia.cmp(&ib))
            .then_with(|| ja.cmp(&jb))
    });

    let mut taken: Vec<Vec<bool>> = det.iter().map(|d| vec![false; d.ground_truth.len()]).collect();
    let mut tp_flags = Vec::with_capacity(order.len());
    for &(i, j) in &order {
        let pred = det[i].predictions[j].rect();
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in det[i].ground_truth.iter().enumerate() {
            if taken[i][g] {
                continue;
            }
            let [x0, y0, x1, y1] = *gt;
            let v = iou(&pred, &BBox::new(x0, y0, x1, y1));
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let tp = match best {
            Some((g, v)) if v >= iou_threshold => {
                taken[i][g] = true;
                true
            }
            _ => false,
        };
        tp_flags.push(tp);
    }

    let n_pred = tp_flags.len();
    let precisions: Vec<f64> = tp_flags
        .iter()
        .scan(0usize, |tp, &f| {
            *tp += usize::from(f);
            Some(*tp)
        })
        .enumerate()
        .map(|(k, tp)| tp as f64 / (k + 1) as f64)
        .collect();
    // precision envelope: best precision at any later rank
    let mut envelope = precisions.clone();
    for k in (0..n_pred.saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    // recall grows by exactly 1/n_gt at every true positive
    let ap = tp_flags
        .iter()
        .zip(&envelope)
        .filter(|(&f, _)| f)
        .map(|(_, &p)| p)
        .sum::<f64>()
        / n_gt as f64;
    let tp = tp_flags.iter().filter(|&&f| f).count();
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = tp as f64 / n_gt as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(DetectionMetrics {
        ap,
        precision,
        recall,
        f1,
    })
}

pub fn write_detections(det: &[ImageDetections], path: &Path) -> Result<()> {
    let mut text = String::new();
    for d in det {
        text.push_str(&serde_json::to_string(d).expect("detection record serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_detections(path: &Path) -> Result<DetectionSet> {
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
        let d: ImageDetections = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        d.validate().map_err(|e| parse_err(i + 1, e.to_string()))?;
        out.push(d);
    }
    Ok(out)
}
