use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::loss::{LossGraph, LossTerms};
use super::model::{DenoiserInput, DenoiserModel, ModelArch};
use super::optim::{optimizer_step, OptimConfig, TrainState};
use super::schedule::{forward_diffuse, make_schedule, Schedule};
use super::{condition, to_model_space};
use crate::codec::encode;
use crate::error::{Error, Result};
use crate::geometry::{sample_training_pair, MaskConfig};
use crate::io::write_atomic;
use crate::rng::{stage_rng, stage_seed, StageRng};
use crate::synth::{read_manifest, DatasetSample, Label};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: super::schedule::DEFAULT_STEPS,
            beta_start: super::schedule::DEFAULT_BETA_START,
            beta_end: super::schedule::DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Optimizer steps.
    pub steps: usize,
    pub batch_size: usize,
    /// Micro-batches whose gradients are averaged per optimizer step.
    pub accumulation: usize,
    pub arch: ModelArch,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub masks: MaskConfig,
    /// Chance that a lesion sample is trained with the `Polyp` prompt rather
    /// than as a `Normal` pair with a mask outside its box.
    pub polyp_prompt_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 500,
            batch_size: 2,
            accumulation: 4,
            arch: ModelArch::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            masks: MaskConfig::default(),
            polyp_prompt_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.optim.validate()?;
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch size and accumulation must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.polyp_prompt_prob) {
            return Err(Error::Config("polyp_prompt_prob must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_mse: f64,
    pub l_lg: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: TrainState,
    pub log: Vec<LossRecord>,
}

pub fn initial_state(cfg: &TrainConfig) -> Result<TrainState> {
    let model = DenoiserModel::init(cfg.arch, stage_seed(cfg.seed, "model-init"))?;
    Ok(TrainState::new(model, cfg.optim))
}

pub fn train_from_manifest(manifest: &Path, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let samples = read_manifest(manifest)?;
    train(&samples, cfg)
}

pub fn train(samples: &[DatasetSample], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut state = initial_state(cfg)?;
    let sched = cfg.schedule.build()?;
    let latents: Vec<Tensor3> = samples
        .iter()
        .map(|s| encode(&s.image).map(|z| to_model_space(&z)))
        .collect::<Result<_>>()?;
    let mut rng = stage_rng(cfg.seed, "train");
    let mut log = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let mut grads = vec![0.0; state.model.params().len()];
        let mut acc = LossTerms::default();
        for _ in 0..cfg.accumulation {
            let mut graph = LossGraph::new(cfg.optim.lambda)?;
            for _ in 0..cfg.batch_size {
                let idx = rng.random_range(0..samples.len());
                let (input, eps) = training_example(&samples[idx], &latents[idx], &sched, cfg, &mut rng)?;
                graph.record(&state.model, &input, &eps)?;
            }
            let l = graph.loss()?;
            if !l.total.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at step {}", state.step + 1)));
            }
            let g = graph.backward(&state.model)?;
            let k = 1.0 / cfg.accumulation as f64;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += k * b;
            }
            acc.mse += k * l.mse;
            acc.lesion += k * l.lesion;
            acc.total += k * l.total;
        }
        optimizer_step(&mut state, &grads)?;
        log.push(LossRecord {
            step: state.step,
            l_mse: acc.mse,
            l_lg: acc.lesion,
            l_total: acc.total,
        });
    }
    Ok(TrainOutput { state, log })
}

fn training_example(
    sample: &DatasetSample,
    z0: &Tensor3,
    sched: &Schedule,
    cfg: &TrainConfig,
    rng: &mut StageRng,
) -> Result<(DenoiserInput, Tensor3)> {
    let prompt = match sample.label {
        Label::Polyp if rng.random_bool(cfg.polyp_prompt_prob) => Label::Polyp,
        _ => Label::Normal,
    };
    let pair = match sample_training_pair(sample, prompt, &cfg.masks, rng) {
        Ok(p) => p,
        // box too large to leave room for an outside mask
        Err(Error::Placement(_)) if sample.label == Label::Polyp => {
            sample_training_pair(sample, Label::Polyp, &cfg.masks, rng)?
        }
        Err(e) => return Err(e),
    };
    let (z_masked, mask) = condition(&pair.image, &pair.mask)?;
    let t = rng.random_range(0..sched.len());
    let (c, h, w) = z0.shape();
    let eps = Tensor3::from_fn(c, h, w, |_, _, _| rng.sample(StandardNormal));
    let z_t = forward_diffuse(z0, t, &eps, sched)?;
    Ok((
        DenoiserInput {
            z_t,
            z_masked,
            mask,
            prompt: pair.prompt,
            t,
        },
        eps,
    ))
}

pub fn write_loss_log(log: &[LossRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r).expect("loss record serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            arch: ModelArch { hidden: 4, time_dim: 4 },
            seed: 3,
            ..Default::default()
        }
    }

    fn data() -> Vec<DatasetSample> {
        generate_dataset(&SynthConfig {
            count: 8,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let cfg = tiny_cfg(0);
        let out = train(&data(), &cfg).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.state, initial_state(&cfg).unwrap());
    }

    #[test]
    fn same_seed_same_log() {
        let cfg = tiny_cfg(5);
        let a = train(&data(), &cfg).unwrap();
        let b = train(&data(), &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.state, b.state);
        assert_eq!(a.log.len(), 5);
        assert_eq!(a.state.step, 5);
    }

    #[test]
    fn empty_set_is_config_error() {
        assert!(matches!(train(&[], &tiny_cfg(1)), Err(Error::Config(_))));
    }

    #[test]
    fn loss_log_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let log = train(&data(), &tiny_cfg(3)).unwrap().log;
        let p = dir.path().join("loss.jsonl");
        write_loss_log(&log, &p).unwrap();
        assert_eq!(read_loss_log(&p).unwrap(), log);
    }
}
