use std::fs;
use std::path::{Path, PathBuf};

use polypgen_core::diffusion::train::write_loss_log;
use polypgen_core::features::{global_feature, read_grids, read_store, FeatureDB};
use polypgen_core::metrics::{
    detection_metrics, fid, gaussian_stats, inception_score, read_detections, read_prob_records, DetectionMetrics,
    ProbRecord, ToyClassifier,
};
use polypgen_core::retrieval::{
    build_database, propose_masks, write_proposals, BuildConfig, FeatureSource, MaskProposal,
};
use polypgen_core::rng::stage_seed;
use polypgen_core::synth::{generate_dataset, read_manifest, write_manifest};
use polypgen_core::{diffusion::sampler::sample, BinaryMask, Checkpoint, GrayImage, Label, Prompt, Schedule};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Gradient-descent settings for the fallback IS classifier.
const CLASSIFIER_ITERATIONS: usize = 300;
const CLASSIFIER_LR: f64 = 0.5;

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn image_id(path: &Path) -> Result<String, CliError> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| CliError::usage(format!("cannot derive an image id from {}", path.display())))
}

fn load_model(cfg: &RunConfig) -> Result<(Checkpoint, Schedule), CliError> {
    require(&cfg.paths.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::read(&cfg.paths.checkpoint)?;
    let sched = cfg.schedule.build().map_err(CliError::config)?;
    Ok((ckpt, sched))
}

/// The configured feature source; an exported store fixes channels and
/// patch size.
pub fn feature_source(cfg: &RunConfig) -> Result<FeatureSource, CliError> {
    match &cfg.retrieval.exported_features {
        None => Ok(FeatureSource::Synthetic {
            patch_size: cfg.retrieval.patch_size,
        }),
        Some(p) => {
            require(p, "exported feature store")?;
            let (channels, patch_size, grids) = read_grids(p)?;
            Ok(FeatureSource::exported(channels, patch_size, grids))
        }
    }
}

fn load_database(cfg: &RunConfig, source: &FeatureSource) -> Result<FeatureDB, CliError> {
    require(&cfg.paths.feature_store, "feature store")?;
    let db = read_store(&cfg.paths.feature_store)?;
    if db.channels() != source.channels() || db.patch_size() != source.patch_size() {
        return Err(CliError::data(format!(
            "feature store has C={} P={}, query features have C={} P={}",
            db.channels(),
            db.patch_size(),
            source.channels(),
            source.patch_size()
        )));
    }
    Ok(db)
}

pub fn synth_data(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let samples = generate_dataset(&cfg.synth_config())?;
    Ok(write_manifest(&samples, &cfg.paths.data_dir)?)
}

pub fn train(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let manifest = cfg.manifest_path();
    require(&manifest, "manifest")?;
    let samples = read_manifest(&manifest)?;
    let out = polypgen_core::train(&samples, &cfg.train_config())?;
    write_loss_log(&out.log, &cfg.paths.loss_log)?;
    Checkpoint::from_state(&out.state).write(&cfg.paths.checkpoint)?;
    Ok(cfg.paths.checkpoint.clone())
}

pub fn build_db(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let manifest = cfg.manifest_path();
    require(&manifest, "manifest")?;
    let source = feature_source(cfg)?;
    let (ckpt, sched) = load_model(cfg)?;
    let samples = read_manifest(&manifest)?;
    let build = BuildConfig {
        seed: cfg.run.seed,
        sampler: cfg.sampler_config(),
    };
    let (db, _) = build_database(&samples, &ckpt.model, &sched, &source, &build)?;
    polypgen_core::features::write_store(&db, &cfg.paths.feature_store)?;
    Ok(cfg.paths.feature_store.clone())
}

/// Proposals for the image at `path`, best first.
pub fn proposals_for(cfg: &RunConfig, path: &Path) -> Result<(String, GrayImage, Vec<MaskProposal>), CliError> {
    require(path, "image")?;
    let id = image_id(path)?;
    let source = feature_source(cfg)?;
    let db = load_database(cfg, &source)?;
    let image = GrayImage::read_pgm(path)?;
    let query = source.features(&id, &image)?;
    let mut params = cfg.cluster_params();
    params.eps_radius = polypgen_core::ClusterParams::for_patch_size(source.patch_size()).eps_radius;
    let props = propose_masks(&query, &db, cfg.retrieval.k, &params)?;
    Ok((id, image, props))
}

pub fn propose(cfg: &RunConfig, image: &Path, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let (id, _, props) = proposals_for(cfg, image)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output_dir.join(format!("{id}.proposals.jsonl")));
    write_proposals(&id, &props, &out)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum MaskSource {
    File(PathBuf),
    /// The top retrieval proposal.
    Auto,
}

pub fn generate(
    cfg: &RunConfig,
    image_path: &Path,
    mask: &MaskSource,
    prompt: Prompt,
    out: Option<&Path>,
) -> Result<PathBuf, CliError> {
    require(image_path, "image")?;
    if let MaskSource::File(m) = mask {
        require(m, "mask")?;
    }
    let (ckpt, sched) = load_model(cfg)?;
    let id = image_id(image_path)?;
    let (image, mask) = match mask {
        MaskSource::File(m) => (GrayImage::read_pgm(image_path)?, BinaryMask::read_pgm(m)?),
        MaskSource::Auto => {
            let (_, image, props) = proposals_for(cfg, image_path)?;
            let top = props
                .first()
                .ok_or_else(|| CliError::data(format!("{id}: no mask proposal found; nothing to inpaint")))?;
            let (h, w) = image.dims();
            let mask = BinaryMask::from_bbox(h, w, &top.rect);
            (image, mask)
        }
    };
    let seed = stage_seed(cfg.run.seed, &format!("generate/{id}"));
    let result = sample(&ckpt.model, &image, &mask, prompt, &sched, &cfg.sampler_config(), seed)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output_dir.join(format!("{id}.{}.pgm", prompt.as_str())));
    result.write_pgm(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationReport {
    pub real_images: usize,
    pub generated_images: usize,
    pub fid: f64,
    pub is: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub iou_threshold: f64,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub generation: GenerationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionReport>,
}

/// `(id, image)` for every `.pgm` in `dir`, by file name.
fn read_image_dir(dir: &Path) -> Result<Vec<(String, GrayImage)>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok((image_id(p)?, GrayImage::read_pgm(p)?)))
        .collect()
}

fn global_features(source: &FeatureSource, images: &[(String, GrayImage)]) -> Result<Vec<Vec<f64>>, CliError> {
    images
        .iter()
        .map(|(id, im)| Ok(global_feature(&source.features(id, im)?).0))
        .collect()
}

fn generation_report(cfg: &RunConfig) -> Result<GenerationReport, CliError> {
    let ev = &cfg.evaluate;
    let real_dir = ev
        .real_dir
        .as_ref()
        .ok_or_else(|| CliError::usage("evaluate.real_dir is not set"))?;
    let gen_dir = ev
        .generated_dir
        .as_ref()
        .ok_or_else(|| CliError::usage("evaluate.generated_dir is not set"))?;
    require(real_dir, "real image directory")?;
    require(gen_dir, "generated image directory")?;
    if let Some(p) = &ev.prob_records {
        require(p, "probability records")?;
    } else {
        require(&cfg.manifest_path(), "manifest")?;
    }
    let source = feature_source(cfg)?;
    let real = read_image_dir(real_dir)?;
    let generated = read_image_dir(gen_dir)?;
    let fid_value = fid(
        &gaussian_stats(&global_features(&source, &real)?)?,
        &gaussian_stats(&global_features(&source, &generated)?)?,
    )?;
    let records: Vec<ProbRecord> = match &ev.prob_records {
        Some(p) => read_prob_records(p)?,
        None => {
            let samples = read_manifest(&cfg.manifest_path())?;
            let train: Vec<(&GrayImage, Label)> = samples.iter().map(|s| (&s.image, s.label)).collect();
            let clf = ToyClassifier::fit(&train, CLASSIFIER_ITERATIONS, CLASSIFIER_LR)?;
            generated
                .iter()
                .map(|(id, im)| clf.prob_record(id, im))
                .collect::<Result<_, _>>()?
        }
    };
    Ok(GenerationReport {
        real_images: real.len(),
        generated_images: generated.len(),
        fid: fid_value,
        is: inception_score(&records, ev.is_splits)?,
    })
}

/// Writes the report and returns it with its path.
pub fn evaluate(cfg: &RunConfig, report: Option<&Path>) -> Result<(PathBuf, Report), CliError> {
    if let Some(d) = &cfg.evaluate.detections {
        require(d, "detections")?;
    }
    let generation = generation_report(cfg)?;
    let detection = match &cfg.evaluate.detections {
        None => None,
        Some(p) => {
            let thr = cfg.evaluate.iou_threshold;
            let DetectionMetrics {
                ap,
                precision,
                recall,
                f1,
            } = detection_metrics(&read_detections(p)?, thr)?;
            Some(DetectionReport {
                iou_threshold: thr,
                ap,
                precision,
                recall,
                f1,
            })
        }
    };
    let rep = Report { generation, detection };
    let text = toml::to_string(&rep).map_err(|e| CliError::data(format!("report: {e}")))?;
    let out = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output_dir.join("report.toml"));
    polypgen_core::io::write_atomic(&out, text.as_bytes())?;
    Ok((out, rep))
}
