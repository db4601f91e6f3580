//! Procedural stand-in for an endoscopy dataset: smooth low-frequency
//! backgrounds with an optional bright lesion blob and its bounding box.
//!
//! Samples are stored as 8-bit graymaps next to a line-delimited JSON
//! manifest, one record per sample:
//!
//! ```text
//! {"id":"synth_0003","image":"images/synth_0003.pgm","label":"polyp","bbox":[12,4,27,19]}
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::raster::{BBox, GrayImage};
use crate::rng::{stage_rng, StageRng};

/// Class of a sample, and the text prompt steering the inpainting model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Polyp,
    Normal,
}

/// Prompts take the same two values as labels.
pub type Prompt = Label;

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Polyp => 0,
            Label::Normal => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Polyp => "polyp",
            Label::Normal => "normal",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "polyp" => Ok(Label::Polyp),
            "normal" => Ok(Label::Normal),
            other => Err(Error::arg(format!(
                "unknown label {other:?} (expected polyp or normal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub image_id: String,
    pub image: GrayImage,
    pub label: Label,
    /// Present iff `label == Polyp`.
    pub bbox: Option<BBox>,
}

impl DatasetSample {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image.dims();
        match (self.label, self.bbox) {
            (Label::Normal, Some(_)) => return Err(Error::arg(format!("{}: normal sample has a bbox", self.image_id))),
            (Label::Polyp, None) => return Err(Error::arg(format!("{}: polyp sample without bbox", self.image_id))),
            (_, Some(b)) if !b.fits(h, w) => {
                return Err(Error::arg(format!(
                    "{}: bbox {b:?} is degenerate or outside {w}x{h}",
                    self.image_id
                )))
            }
            _ => {}
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg(format!("{}: pixel outside [0,1]", self.image_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    /// (height, width) in pixels.
    pub resolution: (usize, usize),
    pub polyp_fraction: f64,
    pub seed: u64,
    pub blob_intensity: f64,
    /// Number of lowest spatial frequencies kept in the background.
    pub texture_smoothness: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 64,
            resolution: (32, 32),
            polyp_fraction: 0.5,
            seed: 0,
            blob_intensity: 0.5,
            texture_smoothness: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "resolution {h}x{w} must be positive multiples of 8"
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.polyp_fraction) {
            return Err(Error::Config("polyp_fraction must lie in [0,1]".into()));
        }
        if !(self.blob_intensity > 0.0 && self.blob_intensity < 1.0) {
            return Err(Error::Config("blob_intensity must lie in (0,1)".into()));
        }
        if self.texture_smoothness == 0 {
            return Err(Error::Config("texture_smoothness must be positive".into()));
        }
        Ok(())
    }

    pub fn polyp_count(&self) -> usize {
        (self.count as f64 * self.polyp_fraction).round() as usize
    }
}

/// Background contrast as a fraction of the blob intensity. Keeps every
/// lesion at least `blob_intensity / 2` brighter than its surroundings.
const BACKGROUND_RELATIVE_AMPLITUDE: f64 = 0.1;
/// Blob half-axes are drawn from this range, as a fraction of the image side.
const BLOB_AXIS_RANGE: (f64, f64) = (0.08, 0.22);

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<DatasetSample>> {
    cfg.validate()?;
    let mut rng = stage_rng(cfg.seed, "synth");
    let polyp_idx = rand::seq::index::sample(&mut rng, cfg.count, cfg.polyp_count());
    let mut is_polyp = vec![false; cfg.count];
    for i in polyp_idx.iter() {
        is_polyp[i] = true;
    }

    let (h, w) = cfg.resolution;
    let amp = BACKGROUND_RELATIVE_AMPLITUDE * cfg.blob_intensity;
    let base = 0.5 * (1.0 - cfg.blob_intensity - amp);

    let mut out = Vec::with_capacity(cfg.count);
    for (i, &polyp) in is_polyp.iter().enumerate() {
        let texture = low_frequency_texture(h, w, cfg.texture_smoothness, &mut rng);
        let mut img = GrayImage::new(h, w, texture.iter().map(|t| base + amp * t).collect())?;
        let bbox = polyp.then(|| render_blob(&mut img, cfg.blob_intensity, &mut rng));
        img.quantize_8bit();
        out.push(DatasetSample {
            image_id: format!("synth_{i:04}"),
            image: img,
            label: if polyp { Label::Polyp } else { Label::Normal },
            bbox,
        });
    }
    Ok(out)
}

/// Real part of the inverse DFT of white noise restricted to the
/// `smoothness` lowest frequencies per axis, min-max rescaled to `[0, 1]`.
fn low_frequency_texture(h: usize, w: usize, smoothness: usize, rng: &mut StageRng) -> Vec<f64> {
    let k = smoothness as i64 - 1;
    // half-plane of frequencies; the conjugate half is implied by taking the real part
    let mut terms = Vec::new();
    for ky in -k..=k {
        for kx in -k..=k {
            if ky < 0 || (ky == 0 && kx <= 0) {
                continue;
            }
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            terms.push((ky as f64 / h as f64, kx as f64 / w as f64, a, b));
        }
    }
    let mut v = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            v[y * w + x] = terms
                .iter()
                .map(|&(fy, fx, a, b)| {
                    let th = 2.0 * PI * (fy * y as f64 + fx * x as f64);
                    a * th.cos() + b * th.sin()
                })
                .sum();
        }
    }
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    if hi - lo > 1e-12 {
        v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    } else {
        v.iter_mut().for_each(|x| *x = 0.5);
    }
    v
}

/// Adds a flat-topped elliptical bump `intensity * exp(-q^4)` and returns the
/// box of pixel centers within the extent of its `q <= 1` ellipse.
fn render_blob(img: &mut GrayImage, intensity: f64, rng: &mut StageRng) -> BBox {
    let (h, w) = img.dims();
    let (lo, hi) = BLOB_AXIS_RANGE;
    let ax = (rng.random_range(lo..hi) * w as f64).max(1.5);
    let ay = (rng.random_range(lo..hi) * h as f64).max(1.5);
    let cx = rng.random_range(ax..(w as f64 - ax).max(ax + 1e-9));
    let cy = rng.random_range(ay..(h as f64 - ay).max(ay + 1e-9));
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 + 0.5 - cx) / ax;
            let dy = (y as f64 + 0.5 - cy) / ay;
            let q = dx * dx + dy * dy;
            let v = img.get(y, x) + intensity * (-q.powi(4)).exp();
            img.set(y, x, v.min(1.0));
        }
    }
    // pixels whose centers fall inside the q <= 1 ellipse's extent
    let x0 = (cx - ax - 0.5).ceil().max(0.0) as u32;
    let y0 = (cy - ay - 0.5).ceil().max(0.0) as u32;
    let x1 = (((cx + ax - 0.5).floor() + 1.0) as u32).min(w as u32).max(x0 + 1);
    let y1 = (((cy + ay - 0.5).floor() + 1.0) as u32).min(h as u32).max(y0 + 1);
    BBox::new(x0, y0, x1, y1)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    image: String,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[u32; 4]>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes every image as `dir/images/<id>.pgm` and the manifest as
/// `dir/manifest.jsonl`; returns the manifest path.
pub fn write_manifest(samples: &[DatasetSample], dir: &Path) -> Result<PathBuf> {
    for s in samples {
        s.validate()?;
    }
    let mut text = String::new();
    for s in samples {
        let rel = format!("images/{}.pgm", s.image_id);
        s.image.write_pgm(&dir.join(&rel))?;
        let rec = ManifestRecord {
            id: s.image_id.clone(),
            image: rel,
            label: s.label,
            bbox: s.bbox.map(|b| [b.x0, b.y0, b.x1, b.y1]),
        };
        text.push_str(&serde_json::to_string(&rec).expect("manifest record serializes"));
        text.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<DatasetSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let bbox = rec.bbox.map(|[x0, y0, x1, y1]| BBox::new(x0, y0, x1, y1));
        if let Some(b) = bbox {
            if b.is_degenerate() {
                return Err(parse_err(lineno, format!("degenerate bbox {:?}", rec.bbox)));
            }
        }
        let image = GrayImage::read_pgm(&base.join(&rec.image))
            .map_err(|e| parse_err(lineno, format!("image {}: {e}", rec.image)))?;
        let sample = DatasetSample {
            image_id: rec.id,
            image,
            label: rec.label,
            bbox,
        };
        sample.validate().map_err(|e| parse_err(lineno, e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

/// Mean pixel value inside and outside `bbox`.
pub fn region_means(img: &GrayImage, bbox: &BBox) -> (f64, f64) {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if bbox.contains_pixel(y, x) {
                si += img.get(y, x);
                ni += 1;
            } else {
                so += img.get(y, x);
                no += 1;
            }
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}
