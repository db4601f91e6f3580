//! Dense patch-feature grids, mean-pooled global features and the binary
//! retrieval database of (converted normal image features, lesion mask)
//! pairs.
//!
//! Store layout (little-endian):
//!
//! ```text
//! "PGFS" | u32 version = 1 | u32 entry count | u32 C | u32 P
//! per entry:
//!   u32 id length | id bytes (UTF-8) | u32 H | u32 W
//!   f32 x (H/P * W/P * C), patch-major (row, col, channel)
//!   mask: H*W bits row-major, MSB first, zero-padded to a whole byte
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{put_f32s, put_u32, write_atomic, LeReader};
use crate::raster::{BinaryMask, GrayImage};

pub const MAGIC: &[u8; 4] = b"PGFS";
pub const VERSION: u32 = 1;

/// `H/P x W/P x C` local features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub image_id: String,
    patch_size: usize,
    image_dims: (usize, usize),
    channels: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        image_id: impl Into<String>,
        patch_size: usize,
        image_dims: (usize, usize),
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let (h, w) = image_dims;
        if patch_size == 0 || h == 0 || w == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(Error::arg(format!(
                "image dims {h}x{w} must be positive multiples of patch size {patch_size}"
            )));
        }
        if channels == 0 {
            return Err(Error::arg("feature grid needs at least one channel"));
        }
        let n = (h / patch_size) * (w / patch_size) * channels;
        if data.len() != n {
            return Err(Error::arg(format!(
                "feature grid has {} values, expected {n}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("feature grid contains non-finite values"));
        }
        Ok(Self {
            image_id: image_id.into(),
            patch_size,
            image_dims,
            channels,
            data,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.image_dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Patch rows and columns.
    pub fn grid_dims(&self) -> (usize, usize) {
        (self.image_dims.0 / self.patch_size, self.image_dims.1 / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (a, b) = self.grid_dims();
        a * b
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector of patch `k` (row-major patch index).
    #[inline]
    pub fn patch(&self, k: usize) -> &[f32] {
        &self.data[k * self.channels..(k + 1) * self.channels]
    }

    /// Pixel center of patch `k`: `(col*P + P/2, row*P + P/2)`.
    pub fn patch_center(&self, k: usize) -> (f64, f64) {
        let wp = self.grid_dims().1;
        let (row, col) = (k / wp, k % wp);
        let p = self.patch_size as f64;
        (col as f64 * p + p / 2.0, row as f64 * p + p / 2.0)
    }
}

/// Mean-pooled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeature(pub Vec<f64>);

pub fn global_feature(grid: &FeatureGrid) -> GlobalFeature {
    let c = grid.channels();
    let n = grid.num_patches();
    let mut acc = vec![0.0f64; c];
    for k in 0..n {
        for (a, &v) in acc.iter_mut().zip(grid.patch(k)) {
            *a += f64::from(v);
        }
    }
    GlobalFeature(acc.into_iter().map(|s| s / n as f64).collect())
}

/// Patches whose `P x P` block is at least half covered by `mask`.
pub fn masked_patch_indices(mask: &BinaryMask, patch_size: usize) -> Result<Vec<usize>> {
    let (h, w) = mask.dims();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::arg(format!(
            "mask dims {h}x{w} are not multiples of patch size {patch_size}"
        )));
    }
    let (hp, wp) = (h / patch_size, w / patch_size);
    let mut counts = vec![0usize; hp * wp];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                counts[(y / patch_size) * wp + x / patch_size] += 1;
            }
        }
    }
    let area = patch_size * patch_size;
    Ok(counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| 2 * n >= area)
        .map(|(k, _)| k)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatabaseEntry {
    pub entry_id: String,
    pub features: FeatureGrid,
    pub polyp_mask: BinaryMask,
    pub global: GlobalFeature,
}

impl DatabaseEntry {
    pub fn new(entry_id: impl Into<String>, features: FeatureGrid, polyp_mask: BinaryMask) -> Result<Self> {
        let entry_id = entry_id.into();
        if polyp_mask.dims() != features.image_dims() {
            return Err(Error::arg(format!(
                "{entry_id}: mask {:?} does not match feature image dims {:?}",
                polyp_mask.dims(),
                features.image_dims()
            )));
        }
        if polyp_mask.is_empty() {
            return Err(Error::arg(format!("{entry_id}: lesion mask is empty")));
        }
        let global = global_feature(&features);
        Ok(Self {
            entry_id,
            features,
            polyp_mask,
            global,
        })
    }
}

/// In-memory retrieval database. All entries share channel count and patch size.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDB {
    channels: usize,
    patch_size: usize,
    entries: Vec<DatabaseEntry>,
}

impl FeatureDB {
    pub fn new(channels: usize, patch_size: usize) -> Self {
        Self {
            channels,
            patch_size,
            entries: Vec::new(),
        }
    }

    pub fn from_entries(channels: usize, patch_size: usize, entries: Vec<DatabaseEntry>) -> Result<Self> {
        let mut db = Self::new(channels, patch_size);
        for e in entries {
            db.push(e)?;
        }
        Ok(db)
    }

    pub fn push(&mut self, entry: DatabaseEntry) -> Result<()> {
        if entry.features.channels() != self.channels || entry.features.patch_size() != self.patch_size {
            return Err(Error::arg(format!(
                "{}: entry has C={} P={}, store has C={} P={}",
                entry.entry_id,
                entry.features.channels(),
                entry.features.patch_size(),
                self.channels,
                self.patch_size
            )));
        }
        if self.entries.iter().any(|e| e.entry_id == entry.entry_id) {
            return Err(Error::arg(format!("duplicate entry id {}", entry.entry_id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn entries(&self) -> &[DatabaseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, entry_id: &str) -> Option<&DatabaseEntry> {
        self.entries.iter().find(|e| e.entry_id == entry_id)
    }
}

/// One stored record before the database invariants are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredGrid {
    pub grid: FeatureGrid,
    pub mask: BinaryMask,
}

fn encode_store<'a>(
    channels: usize,
    patch_size: usize,
    records: impl ExactSizeIterator<Item = (&'a str, &'a FeatureGrid, &'a BinaryMask)>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, records.len() as u32);
    put_u32(&mut out, channels as u32);
    put_u32(&mut out, patch_size as u32);
    for (id, grid, mask) in records {
        if mask.dims() != grid.image_dims() {
            return Err(Error::arg(format!(
                "{id}: mask {:?} does not match image dims {:?}",
                mask.dims(),
                grid.image_dims()
            )));
        }
        if grid.channels() != channels || grid.patch_size() != patch_size {
            return Err(Error::arg(format!(
                "{id}: channel count or patch size differs from store"
            )));
        }
        put_u32(&mut out, id.len() as u32);
        out.extend_from_slice(id.as_bytes());
        let (h, w) = grid.image_dims();
        put_u32(&mut out, h as u32);
        put_u32(&mut out, w as u32);
        put_f32s(&mut out, grid.data().iter().copied());
        out.extend(pack_bits(mask.bits()));
    }
    Ok(out)
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << (7 - i)))
        })
        .collect()
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (1 << (7 - i % 8)) != 0).collect()
}

pub fn store_to_bytes(db: &FeatureDB) -> Result<Vec<u8>> {
    encode_store(
        db.channels,
        db.patch_size,
        db.entries
            .iter()
            .map(|e| (e.entry_id.as_str(), &e.features, &e.polyp_mask)),
    )
}

/// Encodes raw grids (masks may be empty), e.g. feature exports of query images.
pub fn grids_to_bytes(channels: usize, patch_size: usize, grids: &[StoredGrid]) -> Result<Vec<u8>> {
    encode_store(
        channels,
        patch_size,
        grids.iter().map(|g| (g.grid.image_id.as_str(), &g.grid, &g.mask)),
    )
}

/// Parses the header and every record, checking layout and shapes only.
pub fn grids_from_bytes(buf: &[u8]) -> Result<(usize, usize, Vec<StoredGrid>)> {
    let mut r = LeReader::new(buf);
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad feature store magic {magic:?}"),
        });
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: at,
            msg: format!("unsupported feature store version {version}"),
        });
    }
    let count = r.u32("entry count")? as usize;
    let channels = r.u32("channel count")? as usize;
    let at = r.offset();
    let patch_size = r.u32("patch size")? as usize;
    if count > 0 && (channels == 0 || patch_size == 0) {
        return Err(Error::Format {
            offset: at,
            msg: "channel count and patch size must be positive".into(),
        });
    }
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let start = r.offset();
        let len = r.u32("id length")? as usize;
        let id = std::str::from_utf8(r.bytes(len, "entry id")?)
            .map_err(|_| Error::Format {
                offset: start + 4,
                msg: format!("entry {i}: id is not UTF-8"),
            })?
            .to_owned();
        let at = r.offset();
        let h = r.u32("image height")? as usize;
        let w = r.u32("image width")? as usize;
        if h == 0 || w == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(Error::Format {
                offset: at,
                msg: format!("{id}: image dims {h}x{w} not multiples of patch size {patch_size}"),
            });
        }
        let n = (h / patch_size) * (w / patch_size) * channels;
        let at = r.offset();
        let data = r.f32s(n, "feature grid")?;
        let bits = r.bytes((h * w).div_ceil(8), "mask")?;
        let grid = FeatureGrid::new(id, patch_size, (h, w), channels, data).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        let mask = BinaryMask::from_bits(h, w, unpack_bits(bits, h * w))?;
        out.push(StoredGrid { grid, mask });
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset(),
            msg: format!("{} trailing bytes after last entry", r.remaining()),
        });
    }
    Ok((channels, patch_size, out))
}

pub fn store_from_bytes(buf: &[u8]) -> Result<FeatureDB> {
    let (channels, patch_size, grids) = grids_from_bytes(buf)?;
    let mut db = FeatureDB::new(channels, patch_size);
    for g in grids {
        let id = g.grid.image_id.clone();
        let entry = DatabaseEntry::new(id, g.grid, g.mask).map_err(|e| Error::Format {
            offset: 0,
            msg: e.to_string(),
        })?;
        db.push(entry).map_err(|e| Error::Format {
            offset: 0,
            msg: e.to_string(),
        })?;
    }
    Ok(db)
}

pub fn write_store(db: &FeatureDB, path: &Path) -> Result<()> {
    write_atomic(path, &store_to_bytes(db)?)
}

pub fn read_store(path: &Path) -> Result<FeatureDB> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    store_from_bytes(&buf)
}

pub fn read_grids(path: &Path) -> Result<(usize, usize, Vec<StoredGrid>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    grids_from_bytes(&buf)
}

/// Checks that `ids` are unique; used when ingesting external stores.
pub fn unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> bool {
    let mut seen = HashSet::new();
    ids.into_iter().all(|id| seen.insert(id))
}

/// Deterministic hand-crafted patch descriptor standing in for a pretrained
/// encoder.
pub const SYNTHETIC_CHANNELS: usize = 8;

/// Per `P x P` patch: mean, standard deviation, horizontal and vertical
/// half-difference, quadrant checker, range, contrast to the image mean and
/// center-minus-ring.
pub fn synthetic_features(image_id: &str, image: &GrayImage, patch_size: usize) -> Result<FeatureGrid> {
    let (h, w) = image.dims();
    if patch_size < 2 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::arg(format!(
            "image {h}x{w} is not tiled by patch size {patch_size}"
        )));
    }
    let img_mean = image.data().iter().sum::<f64>() / (h * w) as f64;
    let (hp, wp) = (h / patch_size, w / patch_size);
    let p = patch_size;
    let half = p / 2;
    let inner = p / 4..p - p / 4;
    let mut data = Vec::with_capacity(hp * wp * SYNTHETIC_CHANNELS);
    for row in 0..hp {
        for col in 0..wp {
            let px = |dy: usize, dx: usize| image.get(row * p + dy, col * p + dx);
            let mut sum = 0.0;
            let mut sq = 0.0;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut left, mut top, mut checker) = (0.0, 0.0, 0.0);
            let (mut center, mut n_center) = (0.0, 0usize);
            for dy in 0..p {
                for dx in 0..p {
                    let v = px(dy, dx);
                    sum += v;
                    sq += v * v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                    if dx < half {
                        left += v;
                    }
                    if dy < half {
                        top += v;
                    }
                    checker += if (dx < half) == (dy < half) { v } else { -v };
                    if inner.contains(&dy) && inner.contains(&dx) {
                        center += v;
                        n_center += 1;
                    }
                }
            }
            let n = (p * p) as f64;
            let mean = sum / n;
            let nh = (half * p) as f64;
            let ring = (sum - center) / (n - n_center as f64).max(1.0);
            let feats = [
                mean,
                (sq / n - mean * mean).max(0.0).sqrt(),
                (sum - left) / (n - nh) - left / nh,
                (sum - top) / (n - nh) - top / nh,
                checker / n,
                hi - lo,
                mean - img_mean,
                center / n_center.max(1) as f64 - ring,
            ];
            data.extend(feats.iter().map(|&f| f as f32));
        }
    }
    FeatureGrid::new(image_id, patch_size, (h, w), SYNTHETIC_CHANNELS, data)
}
