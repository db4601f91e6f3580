//! Run configuration: a sectioned `key = value` file (TOML) plus command-line
//! overrides. Relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use polypgen_core::diffusion::train::TrainConfig;
use polypgen_core::synth::MANIFEST_FILE;
use polypgen_core::{ClusterParams, ModelArch, OptimConfig, SamplerConfig, SamplerKind, ScheduleConfig, SynthConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub polyp_fraction: f64,
    pub blob_intensity: f64,
    pub texture_smoothness: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            count: d.count,
            height: d.resolution.0,
            width: d.resolution.1,
            polyp_fraction: d.polyp_fraction,
            blob_intensity: d.blob_intensity,
            texture_smoothness: d.texture_smoothness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub accumulation: usize,
    pub polyp_prompt_prob: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            accumulation: d.accumulation,
            polyp_prompt_prob: d.polyp_prompt_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub steps: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: polypgen_core::diffusion::sampler::DEFAULT_SAMPLING_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    pub min_points: usize,
    pub patch_size: usize,
    /// Externally exported feature store; the built-in descriptor is used
    /// when absent.
    pub exported_features: Option<PathBuf>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            k: 5,
            min_points: ClusterParams::DEFAULT_MIN_POINTS,
            // lesions in the 32x32 synthetic set span 5-15 px
            patch_size: 4,
            exported_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Directories of `.pgm` images compared by FID.
    pub real_dir: Option<PathBuf>,
    pub generated_dir: Option<PathBuf>,
    /// Class-probability records for IS; without them a toy classifier is
    /// fitted on the manifest and applied to the generated images.
    pub prob_records: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub iou_threshold: f64,
    pub is_splits: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            real_dir: None,
            generated_dir: None,
            prob_records: None,
            detections: None,
            iou_threshold: polypgen_core::metrics::DEFAULT_IOU_THRESHOLD,
            is_splits: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Directory written by `synth-data`.
    pub data_dir: PathBuf,
    /// Defaults to `data_dir/manifest.jsonl`.
    pub manifest: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub feature_store: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            manifest: None,
            checkpoint: "run/model.pgck".into(),
            loss_log: "run/loss.jsonl".into(),
            feature_store: "run/db.pgfs".into(),
            output_dir: "run/out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub schedule: ScheduleConfig,
    pub model: ModelArch,
    pub optim: OptimConfig,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub retrieval: RetrievalSection,
    pub evaluate: EvaluateSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))
    }

    /// Reads `path` (or the defaults when `None`) and makes relative paths
    /// absolute against the file's directory or `cwd`.
    pub fn load(path: Option<&Path>, cwd: &Path) -> Result<Self, CliError> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?;
                let dir = p.parent().map(|d| cwd.join(d)).unwrap_or_else(|| cwd.to_path_buf());
                (Self::parse(&text)?, dir)
            }
            None => (Self::default(), cwd.to_path_buf()),
        };
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.data_dir);
        if let Some(m) = paths.manifest.as_mut() {
            fix(m);
        }
        fix(&mut paths.checkpoint);
        fix(&mut paths.loss_log);
        fix(&mut paths.feature_store);
        fix(&mut paths.output_dir);
        for p in [
            &mut self.retrieval.exported_features,
            &mut self.evaluate.real_dir,
            &mut self.evaluate.generated_dir,
            &mut self.evaluate.prob_records,
            &mut self.evaluate.detections,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths
            .manifest
            .clone()
            .unwrap_or_else(|| self.paths.data_dir.join(MANIFEST_FILE))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::usage(m));
        self.synth_config().validate().map_err(CliError::config)?;
        self.train_config().validate().map_err(CliError::config)?;
        if !(self.optim.lambda >= 0.0) {
            return bad(format!("optim.lambda must be >= 0, got {}", self.optim.lambda));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.steps {
            return bad(format!(
                "sampler.steps must lie in 1..={}, got {}",
                self.schedule.steps, self.sampler.steps
            ));
        }
        if self.retrieval.k == 0 {
            return bad("retrieval.k must be positive".into());
        }
        if self.retrieval.patch_size == 0 {
            return bad("retrieval.patch_size must be positive".into());
        }
        self.cluster_params().validate().map_err(CliError::config)?;
        let iou = self.evaluate.iou_threshold;
        if !(iou > 0.0 && iou < 1.0) {
            return bad(format!("evaluate.iou_threshold must lie in (0,1), got {iou}"));
        }
        if self.evaluate.is_splits == 0 {
            return bad("evaluate.is_splits must be positive".into());
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            count: self.data.count,
            resolution: (self.data.height, self.data.width),
            polyp_fraction: self.data.polyp_fraction,
            seed: self.run.seed,
            blob_intensity: self.data.blob_intensity,
            texture_smoothness: self.data.texture_smoothness,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.run.seed,
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            accumulation: self.train.accumulation,
            arch: self.model,
            optim: self.optim,
            schedule: self.schedule,
            polyp_prompt_prob: self.train.polyp_prompt_prob,
            ..TrainConfig::default()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig::for_kind(self.sampler.kind, self.sampler.steps)
    }

    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams {
            min_points: self.retrieval.min_points,
            ..ClusterParams::for_patch_size(self.retrieval.patch_size)
        }
    }
}
