//! Evaluation: Fréchet distance, Inception Score and detection scores.

pub mod classifier;
pub mod detection;
pub mod fid;
pub mod inception;

pub use classifier::{image_statistics, ToyClassifier};
pub use detection::{
    detection_metrics, iou, read_detections, write_detections, DetectionMetrics, DetectionSet, ImageDetections,
    ScoredBox, DEFAULT_IOU_THRESHOLD,
};
pub use fid::{fid, gaussian_stats, GaussianStats};
pub use inception::{inception_score, read_prob_records, write_prob_records, ProbRecord};
