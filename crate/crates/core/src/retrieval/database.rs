use std::collections::HashMap;

use crate::diffusion::model::DenoiserModel;
use crate::diffusion::sampler::{sample, SamplerConfig};
use crate::diffusion::schedule::Schedule;
use crate::error::{Error, Result};
use crate::features::{synthetic_features, DatabaseEntry, FeatureDB, FeatureGrid, StoredGrid, SYNTHETIC_CHANNELS};
use crate::raster::{BinaryMask, GrayImage};
use crate::rng::stage_seed;
use crate::synth::{DatasetSample, Label};

/// Where the local features of converted images come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    /// The built-in hand-crafted descriptor at the given patch size.
    Synthetic { patch_size: usize },
    /// Grids exported by an external encoder, keyed by image id.
    Exported {
        channels: usize,
        patch_size: usize,
        grids: HashMap<String, FeatureGrid>,
    },
}

impl FeatureSource {
    pub fn exported(channels: usize, patch_size: usize, grids: Vec<StoredGrid>) -> Self {
        let grids = grids.into_iter().map(|g| (g.grid.image_id.clone(), g.grid)).collect();
        FeatureSource::Exported {
            channels,
            patch_size,
            grids,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            FeatureSource::Synthetic { .. } => SYNTHETIC_CHANNELS,
            FeatureSource::Exported { channels, .. } => *channels,
        }
    }

    pub fn patch_size(&self) -> usize {
        match self {
            FeatureSource::Synthetic { patch_size } => *patch_size,
            FeatureSource::Exported { patch_size, .. } => *patch_size,
        }
    }

    /// Features of `image`, registered under `image_id`.
    pub fn features(&self, image_id: &str, image: &GrayImage) -> Result<FeatureGrid> {
        match self {
            FeatureSource::Synthetic { patch_size } => synthetic_features(image_id, image, *patch_size),
            FeatureSource::Exported { grids, .. } => {
                let g = grids
                    .get(image_id)
                    .ok_or_else(|| Error::Ingestion(format!("no exported features for image {image_id}")))?;
                if g.image_dims() != image.dims() {
                    return Err(Error::Ingestion(format!(
                        "{image_id}: exported grid covers {:?}, image is {:?}",
                        g.image_dims(),
                        image.dims()
                    )));
                }
                Ok(g.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BuildConfig {
    pub seed: u64,
    pub sampler: SamplerConfig,
}

/// Converts every lesion sample to a normal-looking image inside its box and
/// stores the features of the result with the box mask. Returns the
/// database and the converted images in sample order.
pub fn build_database(
    samples: &[DatasetSample],
    model: &DenoiserModel,
    sched: &Schedule,
    source: &FeatureSource,
    cfg: &BuildConfig,
) -> Result<(FeatureDB, Vec<(String, GrayImage)>)> {
    let mut db = FeatureDB::new(source.channels(), source.patch_size());
    let mut converted = Vec::new();
    for s in samples.iter().filter(|s| s.label == Label::Polyp) {
        let bbox = s
            .bbox
            .ok_or_else(|| Error::Ingestion(format!("{}: polyp sample without bbox", s.image_id)))?;
        let (h, w) = s.image.dims();
        let mask = BinaryMask::from_bbox(h, w, &bbox);
        let seed = stage_seed(cfg.seed, &format!("build-db/{}", s.image_id));
        let normal = sample(model, &s.image, &mask, Label::Normal, sched, &cfg.sampler, seed)?;
        let grid = source.features(&s.image_id, &normal)?;
        db.push(DatabaseEntry::new(s.image_id.clone(), grid, mask)?)?;
        converted.push((s.image_id.clone(), normal));
    }
    Ok((db, converted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::ModelArch;
    use crate::features::store_to_bytes;
    use crate::synth::{generate_dataset, SynthConfig};

    fn fixture() -> (Vec<DatasetSample>, DenoiserModel, Schedule) {
        let samples = generate_dataset(&SynthConfig {
            count: 6,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let model = DenoiserModel::init(ModelArch { hidden: 4, time_dim: 4 }, 2).unwrap();
        (samples, model, Schedule::default())
    }

    fn cfg() -> BuildConfig {
        BuildConfig {
            seed: 1,
            sampler: SamplerConfig::ddim(5),
        }
    }

    #[test]
    fn one_entry_per_polyp_with_box_mask() {
        let (samples, model, sched) = fixture();
        let (db, conv) = build_database(
            &samples,
            &model,
            &sched,
            &FeatureSource::Synthetic { patch_size: 8 },
            &cfg(),
        )
        .unwrap();
        let polyps: Vec<_> = samples.iter().filter(|s| s.label == Label::Polyp).collect();
        assert_eq!(db.len(), polyps.len());
        assert_eq!(conv.len(), polyps.len());
        for (e, s) in db.entries().iter().zip(&polyps) {
            assert_eq!(e.entry_id, s.image_id);
            assert_eq!(e.polyp_mask, BinaryMask::from_bbox(32, 32, &s.bbox.unwrap()));
        }
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let (samples, model, sched) = fixture();
        let src = FeatureSource::Synthetic { patch_size: 8 };
        let a = build_database(&samples, &model, &sched, &src, &cfg()).unwrap().0;
        let b = build_database(&samples, &model, &sched, &src, &cfg()).unwrap().0;
        assert_eq!(store_to_bytes(&a).unwrap(), store_to_bytes(&b).unwrap());
    }

    #[test]
    fn no_polyps_gives_empty_db() {
        let (samples, model, sched) = fixture();
        let normals: Vec<_> = samples.into_iter().filter(|s| s.label == Label::Normal).collect();
        let (db, _) = build_database(
            &normals,
            &model,
            &sched,
            &FeatureSource::Synthetic { patch_size: 8 },
            &cfg(),
        )
        .unwrap();
        assert!(db.is_empty());
    }

    #[test]
    fn missing_exported_grid_names_the_id() {
        let (samples, model, sched) = fixture();
        let src = FeatureSource::exported(8, 8, Vec::new());
        match build_database(&samples, &model, &sched, &src, &cfg()) {
            Err(Error::Ingestion(msg)) => assert!(msg.contains("synth_")),
            other => panic!("{other:?}"),
        }
    }
}
