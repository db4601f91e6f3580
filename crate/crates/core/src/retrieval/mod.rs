//! Hierarchical retrieval mask proposer: global top-K search, masked
//! patch matching, clustering of matched query locations and one
//! patch-aligned rectangle per candidate.

mod database;
pub mod dbscan;

pub use database::{build_database, BuildConfig, FeatureSource};
pub use dbscan::{dbscan, ClusterParams, NOISE};

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{global_feature, masked_patch_indices, DatabaseEntry, FeatureDB, FeatureGrid, GlobalFeature};
use crate::io::write_atomic;
use crate::raster::BBox;

fn l2_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn l2_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_compatible(query: &FeatureGrid, channels: usize, patch_size: usize) -> Result<()> {
    if query.channels() != channels {
        return Err(Error::arg(format!(
            "query has {} feature channels, database has {channels}",
            query.channels()
        )));
    }
    if query.patch_size() != patch_size {
        return Err(Error::arg(format!(
            "query patch size {} differs from database patch size {patch_size}",
            query.patch_size()
        )));
    }
    Ok(())
}

/// Ids of the `k` entries closest to `query` in mean-pooled feature space,
/// nearest first; equal distances are ordered by entry id.
pub fn top_k_global(query: &FeatureGrid, db: &FeatureDB, k: usize) -> Result<Vec<String>> {
    Ok(top_k_with_distance(&global_feature(query), query.channels(), db, k)?
        .into_iter()
        .map(|(id, _)| id.to_owned())
        .collect())
}

fn top_k_with_distance<'a>(
    q: &GlobalFeature,
    channels: usize,
    db: &'a FeatureDB,
    k: usize,
) -> Result<Vec<(&'a str, f64)>> {
    if k == 0 {
        return Err(Error::arg("K must be at least 1"));
    }
    if db.is_empty() {
        return Err(Error::arg("feature database is empty"));
    }
    if channels != db.channels() {
        return Err(Error::arg(format!(
            "query has {channels} feature channels, database has {}",
            db.channels()
        )));
    }
    let mut ranked: Vec<(&str, f64)> = db
        .entries()
        .iter()
        .map(|e| (e.entry_id.as_str(), l2_f64(&q.0, &e.global.0)))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    /// Query patch index.
    pub query_patch: usize,
    /// Masked candidate patch index.
    pub candidate_patch: usize,
    pub distance: f64,
    /// Pixel center `(x, y)` of the query patch.
    pub query_center: (f64, f64),
}

/// For every masked patch of `cand`, the nearest query patch (smallest index
/// on ties).
pub fn match_patches(query: &FeatureGrid, cand: &DatabaseEntry) -> Result<Vec<Match>> {
    check_compatible(query, cand.features.channels(), cand.features.patch_size())?;
    let masked = masked_patch_indices(&cand.polyp_mask, cand.features.patch_size())?;
    let n = query.num_patches();
    Ok(masked
        .into_iter()
        .map(|v| {
            let fv = cand.features.patch(v);
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for u in 0..n {
                let d = l2_f32(query.patch(u), fv);
                if d < best_d {
                    best = u;
                    best_d = d;
                }
            }
            Match {
                query_patch: best,
                candidate_patch: v,
                distance: best_d,
                query_center: query.patch_center(best),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskProposal {
    pub rect: BBox,
    pub source_entry_id: String,
    pub cluster_size: usize,
    /// Mean match distance inside the cluster; lower is better.
    pub score: f64,
}

/// Smallest patch-aligned rectangle holding every point, clipped to the image.
pub fn patch_aligned_rect(points: &[(f64, f64)], patch_size: usize, dims: (usize, usize)) -> Option<BBox> {
    if points.is_empty() {
        return None;
    }
    let p = patch_size as f64;
    let cell = |v: f64| (v / p).floor().max(0.0) as usize;
    let (mut c0, mut r0, mut c1, mut r1) = (usize::MAX, usize::MAX, 0, 0);
    for &(x, y) in points {
        c0 = c0.min(cell(x));
        c1 = c1.max(cell(x));
        r0 = r0.min(cell(y));
        r1 = r1.max(cell(y));
    }
    let (h, w) = dims;
    let rect = BBox::new(
        (c0 * patch_size).min(w) as u32,
        (r0 * patch_size).min(h) as u32,
        ((c1 + 1) * patch_size).min(w) as u32,
        ((r1 + 1) * patch_size).min(h) as u32,
    );
    (!rect.is_degenerate()).then_some(rect)
}

/// The largest cluster of the candidate's matches as a proposal, if any.
fn propose_for_candidate(
    query: &FeatureGrid,
    cand: &DatabaseEntry,
    params: &ClusterParams,
) -> Result<Option<MaskProposal>> {
    let matches = match_patches(query, cand)?;
    let points: Vec<(f64, f64)> = matches.iter().map(|m| m.query_center).collect();
    let labels = dbscan(&points, params)?;
    let n_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut best: Option<(usize, f64, usize)> = None;
    for c in 0..n_clusters {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c as i32).collect();
        let size = members.len();
        let mean = members.iter().map(|&i| matches[i].distance).sum::<f64>() / size as f64;
        let better = match best {
            None => true,
            Some((s, d, _)) => size > s || (size == s && mean < d),
        };
        if better {
            best = Some((size, mean, c));
        }
    }
    let Some((size, score, c)) = best else {
        return Ok(None);
    };
    if size < params.min_points {
        return Ok(None);
    }
    let pts: Vec<(f64, f64)> = (0..labels.len())
        .filter(|&i| labels[i] == c as i32)
        .map(|i| points[i])
        .collect();
    Ok(
        patch_aligned_rect(&pts, query.patch_size(), query.image_dims()).map(|rect| MaskProposal {
            rect,
            source_entry_id: cand.entry_id.clone(),
            cluster_size: size,
            score,
        }),
    )
}

/// Proposals from the `k` globally nearest entries, largest cluster first,
/// then lowest mean match distance. Empty when no candidate yields a cluster.
pub fn propose_masks(
    query: &FeatureGrid,
    db: &FeatureDB,
    k: usize,
    params: &ClusterParams,
) -> Result<Vec<MaskProposal>> {
    params.validate()?;
    check_compatible(query, db.channels(), db.patch_size())?;
    let top = top_k_with_distance(&global_feature(query), query.channels(), db, k)?;
    let mut out = Vec::new();
    for (id, _) in top {
        let cand = db.get(id).expect("ranked id comes from the database");
        if let Some(p) = propose_for_candidate(query, cand, params)? {
            out.push(p);
        }
    }
    out.sort_by(|a, b| {
        b.cluster_size
            .cmp(&a.cluster_size)
            .then_with(|| a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal))
    });
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalRecord {
    query_id: String,
    rect: [u32; 4],
    source_entry_id: String,
    cluster_size: usize,
    score: f64,
}

pub fn write_proposals(query_id: &str, proposals: &[MaskProposal], path: &Path) -> Result<()> {
    let mut text = String::new();
    for p in proposals {
        let rec = ProposalRecord {
            query_id: query_id.to_owned(),
            rect: [p.rect.x0, p.rect.y0, p.rect.x1, p.rect.y1],
            source_entry_id: p.source_entry_id.clone(),
            cluster_size: p.cluster_size,
            score: p.score,
        };
        text.push_str(&serde_json::to_string(&rec).expect("proposal record serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Returns `(query_id, proposal)` pairs in file order.
pub fn read_proposals(path: &Path) -> Result<Vec<(String, MaskProposal)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProposalRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let [x0, y0, x1, y1] = rec.rect;
        out.push((
            rec.query_id,
            MaskProposal {
                rect: BBox::new(x0, y0, x1, y1),
                source_entry_id: rec.source_entry_id,
                cluster_size: rec.cluster_size,
                score: rec.score,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::BinaryMask;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_grid(id: &str, p: usize, hp: usize, wp: usize, c: usize, seed: u64) -> FeatureGrid {
        let mut rng = rng_from_seed(seed);
        let data = (0..hp * wp * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureGrid::new(id, p, (hp * p, wp * p), c, data).unwrap()
    }

    fn patch_mask(p: usize, hp: usize, wp: usize, patches: &[usize]) -> BinaryMask {
        let mut m = BinaryMask::zeros(hp * p, wp * p);
        for &k in patches {
            let (r, c) = (k / wp, k % wp);
            for y in r * p..(r + 1) * p {
                for x in c * p..(c + 1) * p {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    #[test]
    fn identical_entry_ranks_first() {
        let q = random_grid("q", 2, 3, 3, 4, 1);
        let mut db = FeatureDB::new(4, 2);
        for s in 2..6 {
            let g = random_grid(&format!("e{s}"), 2, 3, 3, 4, s);
            db.push(DatabaseEntry::new(format!("e{s}"), g, patch_mask(2, 3, 3, &[0])).unwrap())
                .unwrap();
        }
        db.push(DatabaseEntry::new("same", q.clone(), patch_mask(2, 3, 3, &[4])).unwrap())
            .unwrap();
        let ids = top_k_global(&q, &db, 10).unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], "same");
    }

    #[test]
    fn ties_break_by_id() {
        let g = random_grid("x", 2, 2, 2, 3, 0);
        let mut db = FeatureDB::new(3, 2);
        for id in ["c", "a", "b"] {
            db.push(DatabaseEntry::new(id, g.clone(), patch_mask(2, 2, 2, &[1])).unwrap())
                .unwrap();
        }
        assert_eq!(top_k_global(&g, &db, 2).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn argument_errors() {
        let q = random_grid("q", 2, 2, 2, 3, 0);
        let mut db = FeatureDB::new(4, 2);
        assert!(top_k_global(&q, &db, 1).is_err());
        db.push(DatabaseEntry::new("a", random_grid("a", 2, 2, 2, 4, 1), patch_mask(2, 2, 2, &[0])).unwrap())
            .unwrap();
        assert!(top_k_global(&q, &db, 1).is_err());
        let q4 = random_grid("q", 2, 2, 2, 4, 0);
        assert!(top_k_global(&q4, &db, 0).is_err());
    }

    #[test]
    fn self_match() {
        let q = random_grid("q", 2, 3, 3, 5, 4);
        let e = DatabaseEntry::new("e", q.clone(), patch_mask(2, 3, 3, &[3, 7])).unwrap();
        let m = match_patches(&q, &e).unwrap();
        let got: Vec<_> = m
            .iter()
            .map(|m| (m.query_patch, m.candidate_patch, m.distance))
            .collect();
        assert_eq!(got, vec![(3, 3, 0.0), (7, 7, 0.0)]);
        assert_eq!(m[0].query_center, (1.0, 3.0));
    }

    #[test]
    fn uniform_query_matches_patch_zero() {
        let q = FeatureGrid::new("q", 2, (4, 4), 2, vec![0.5; 8]).unwrap();
        let e = DatabaseEntry::new("e", random_grid("e", 2, 2, 2, 2, 3), patch_mask(2, 2, 2, &[1, 2, 3])).unwrap();
        assert!(match_patches(&q, &e).unwrap().iter().all(|m| m.query_patch == 0));
    }

    #[test]
    fn rect_is_patch_aligned_and_clipped() {
        let r = patch_aligned_rect(&[(3.0, 3.0), (9.0, 5.0)], 4, (12, 10)).unwrap();
        assert_eq!(r, BBox::new(0, 0, 10, 8));
        assert!(patch_aligned_rect(&[], 4, (8, 8)).is_none());
    }

    #[test]
    fn self_retrieval_covers_block() {
        let q = random_grid("q", 4, 4, 4, 6, 9);
        // 2x2 block of patches at rows 1-2, cols 1-2
        let e = DatabaseEntry::new("e", q.clone(), patch_mask(4, 4, 4, &[5, 6, 9, 10])).unwrap();
        let db = FeatureDB::from_entries(6, 4, vec![e]).unwrap();
        let props = propose_masks(&q, &db, 1, &ClusterParams::for_patch_size(4)).unwrap();
        assert_eq!(props.len(), 1);
        assert_eq!(props[0].rect, BBox::new(4, 4, 12, 12));
        assert_eq!(props[0].cluster_size, 4);
        assert_eq!(props[0].score, 0.0);
    }

    #[test]
    fn scattered_matches_give_no_proposal() {
        // query patches far apart in the grid carry the candidate signatures
        let (p, hp, wp, c) = (4, 8, 8, 3);
        let mut data = vec![10.0f32; hp * wp * c];
        let corners = [0usize, 7, 56];
        let sig = |i: usize| [i as f32, -(i as f32), 0.5];
        for (i, &k) in corners.iter().enumerate() {
            data[k * c..(k + 1) * c].copy_from_slice(&sig(i));
        }
        let q = FeatureGrid::new("q", p, (hp * p, wp * p), c, data).unwrap();
        let mut cdata = vec![-10.0f32; hp * wp * c];
        for (i, k) in [27usize, 28, 35].into_iter().enumerate() {
            cdata[k * c..(k + 1) * c].copy_from_slice(&sig(i));
        }
        let cand = FeatureGrid::new("c", p, (hp * p, wp * p), c, cdata).unwrap();
        let db = FeatureDB::from_entries(
            c,
            p,
            vec![DatabaseEntry::new("c", cand, patch_mask(p, hp, wp, &[27, 28, 35])).unwrap()],
        )
        .unwrap();
        let props = propose_masks(&q, &db, 1, &ClusterParams::for_patch_size(p)).unwrap();
        assert!(props.is_empty());
    }

    #[test]
    fn proposals_roundtrip() {
        let props = vec![MaskProposal {
            rect: BBox::new(0, 8, 16, 24),
            source_entry_id: "synth_0001".into(),
            cluster_size: 5,
            score: 0.25,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_proposals("q7", &props, &path).unwrap();
        let back = read_proposals(&path).unwrap();
        assert_eq!(back, vec![("q7".to_string(), props[0].clone())]);
    }
}
