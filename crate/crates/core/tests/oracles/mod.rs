//! Reference implementations used by the integration tests. Deliberately
//! naive: quadratic loops, no shared code with the library beyond its types.

#![allow(dead_code)]

use std::collections::BTreeSet;

use polypgen_core::codec::LatentMask;
use polypgen_core::diffusion::loss::LossGraph;
use polypgen_core::features::{DatabaseEntry, FeatureDB, FeatureGrid};
use polypgen_core::{BBox, BinaryMask, DenoiserInput, DenoiserModel, Label, ModelArch, Tensor3};
use rand::Rng;
use rand_distr::StandardNormal;

// ---------------------------------------------------------------- gradients

pub struct GradDraw {
    pub model: DenoiserModel,
    pub inputs: Vec<DenoiserInput>,
    pub eps: Vec<Tensor3>,
    pub lambda: f64,
}

fn randn<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_fn(c, h, w, |_, _, _| rng.sample(StandardNormal))
}

/// A random small model and batch. Parameters at scale 0.3 keep the loss
/// near unit size, so central differences resolve even the small gradients;
/// every layer still sees non-trivial activations.
pub fn grad_draw<R: Rng>(rng: &mut R) -> GradDraw {
    let arch = ModelArch {
        hidden: rng.random_range(2..=5),
        time_dim: 2 * rng.random_range(1..=3),
    };
    let n = arch.param_count();
    assert!(n <= 2_000, "{n} parameters");
    let params: Vec<f64> = (0..n).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let model = DenoiserModel::from_params(arch, params).unwrap();
    let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let batch = rng.random_range(1..=3);
    let mut inputs = Vec::new();
    let mut eps = Vec::new();
    for _ in 0..batch {
        let bits = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
        inputs.push(DenoiserInput {
            z_t: randn(rng, 4, h, w),
            z_masked: randn(rng, 4, h, w),
            mask: LatentMask(BinaryMask::from_bits(h, w, bits).unwrap()),
            prompt: if rng.random_bool(0.5) {
                Label::Polyp
            } else {
                Label::Normal
            },
            t: rng.random_range(0..1000),
        });
        eps.push(randn(rng, 4, h, w));
    }
    GradDraw {
        model,
        inputs,
        eps,
        lambda: rng.random_range(0.0..1.0),
    }
}

pub fn batch_loss(model: &DenoiserModel, d: &GradDraw) -> f64 {
    let mut g = LossGraph::new(d.lambda).unwrap();
    for (x, e) in d.inputs.iter().zip(&d.eps) {
        g.record(model, x, e).unwrap();
    }
    g.loss().unwrap().total
}

/// Largest relative error between the analytic gradient and the five-point
/// central difference with step `h`. Gradients below `floor` in magnitude
/// are compared against `floor`.
pub fn max_grad_rel_error(d: &GradDraw, h: f64, floor: f64) -> f64 {
    let mut g = LossGraph::new(d.lambda).unwrap();
    for (x, e) in d.inputs.iter().zip(&d.eps) {
        g.record(&d.model, x, e).unwrap();
    }
    let analytic = g.backward(&d.model).unwrap();
    let mut worst = 0.0f64;
    let mut m = d.model.clone();
    let at = |m: &mut DenoiserModel, i: usize, p: f64| {
        m.params_mut()[i] = p;
        batch_loss(m, d)
    };
    for i in 0..analytic.len() {
        let p = m.params()[i];
        let near = at(&mut m, i, p + h) - at(&mut m, i, p - h);
        let far = at(&mut m, i, p + 2.0 * h) - at(&mut m, i, p - 2.0 * h);
        m.params_mut()[i] = p;
        let fd = (8.0 * near - far) / (12.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

// ------------------------------------------------------------------ dbscan

/// Canonical partition: sorted blocks of sorted indices, noise as singletons.
pub fn partition_from_labels(labels: &[i32]) -> BTreeSet<Vec<usize>> {
    let mut out = BTreeSet::new();
    let max = labels.iter().copied().max().unwrap_or(-1);
    for c in 0..=max {
        let block: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if !block.is_empty() {
            out.insert(block);
        }
    }
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 {
            out.insert(vec![i]);
        }
    }
    out
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Density clustering from the pairwise distance matrix: core points joined
/// by union-find; each border point goes to the cluster whose smallest core
/// index is lowest among the clusters with a core in reach.
pub fn dbscan_oracle(points: &[(f64, f64)], eps: f64, min_points: usize) -> BTreeSet<Vec<usize>> {
    let n = points.len();
    let near = |i: usize, j: usize| {
        let dx = points[i].0 - points[j].0;
        let dy = points[i].1 - points[j].1;
        dx * dx + dy * dy <= eps * eps
    };
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_points)
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    // cluster key: smallest core index in the component
    let mut key = vec![usize::MAX; n];
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            key[r] = key[r].min(i);
        }
    }
    let mut label = vec![usize::MAX; n];
    for i in 0..n {
        if core[i] {
            label[i] = key[find(&mut parent, i)];
        } else {
            label[i] = (0..n)
                .filter(|&j| core[j] && near(i, j))
                .map(|j| key[find(&mut parent, j)])
                .min()
                .unwrap_or(usize::MAX);
        }
    }
    let mut out = BTreeSet::new();
    let keys: BTreeSet<usize> = label.iter().copied().filter(|&k| k != usize::MAX).collect();
    for k in keys {
        out.insert((0..n).filter(|&i| label[i] == k).collect());
    }
    for i in 0..n {
        if label[i] == usize::MAX {
            out.insert(vec![i]);
        }
    }
    out
}

// --------------------------------------------------------------- retrieval

pub fn random_grid<R: Rng>(rng: &mut R, id: &str, c: usize, p: usize, hp: usize, wp: usize) -> FeatureGrid {
    let data = (0..hp * wp * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureGrid::new(id, p, (hp * p, wp * p), c, data).unwrap()
}

fn patch_of(g: &FeatureGrid, k: usize) -> Vec<f64> {
    let c = g.channels();
    g.data()[k * c..(k + 1) * c].iter().map(|&v| f64::from(v)).collect()
}

fn mean_vector(g: &FeatureGrid) -> Vec<f64> {
    let c = g.channels();
    let n = g.data().len() / c;
    let mut acc = vec![0.0; c];
    for k in 0..n {
        for (a, v) in acc.iter_mut().zip(patch_of(g, k)) {
            *a += v;
        }
    }
    acc.iter().map(|s| s / n as f64).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sort every entry by (distance of mean vectors, id) and keep `k`.
pub fn top_k_oracle(query: &FeatureGrid, db: &FeatureDB, k: usize) -> Vec<String> {
    let q = mean_vector(query);
    let mut all: Vec<(f64, String)> = db
        .entries()
        .iter()
        .map(|e| (dist(&q, &mean_vector(&e.features)), e.entry_id.clone()))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, id)| id).collect()
}

/// `(query patch, candidate patch)` for every candidate patch at least half
/// covered by its mask; exhaustive scan, first minimum wins.
pub fn match_oracle(query: &FeatureGrid, cand: &DatabaseEntry) -> Vec<(usize, usize)> {
    let p = cand.features.patch_size();
    let (h, w) = cand.polyp_mask.dims();
    let (hp, wp) = (h / p, w / p);
    let mut out = Vec::new();
    for r in 0..hp {
        for c in 0..wp {
            let mut covered = 0;
            for y in r * p..(r + 1) * p {
                for x in c * p..(c + 1) * p {
                    covered += usize::from(cand.polyp_mask.get(y, x));
                }
            }
            if 2 * covered < p * p {
                continue;
            }
            let v = r * wp + c;
            let fv = patch_of(&cand.features, v);
            let nq = query.data().len() / query.channels();
            let mut best = 0;
            for u in 1..nq {
                if dist(&patch_of(query, u), &fv) < dist(&patch_of(query, best), &fv) {
                    best = u;
                }
            }
            out.push((best, v));
        }
    }
    out
}

/// A query whose patches inside `planted` copy the masked patches of one
/// database entry, among `n_entries` random entries. Returns the planted
/// rectangle in pixels.
pub fn planted_fixture<R: Rng>(rng: &mut R, n_entries: usize) -> (FeatureGrid, FeatureDB, BBox) {
    // a 16x16 grid, as with 14-px patches on 224-px images
    let (c, p, gh, gw) = (8, 4, 16, 16);
    let mut db = FeatureDB::new(c, p);
    let mut source = None;
    let target = rng.random_range(0..n_entries);
    for i in 0..n_entries {
        let grid = random_grid(rng, &format!("entry_{i:03}"), c, p, gh, gw);
        let (bh, bw) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let (r0, c0) = (rng.random_range(0..=gh - bh), rng.random_range(0..=gw - bw));
        let rect = BBox::new(
            (c0 * p) as u32,
            (r0 * p) as u32,
            ((c0 + bw) * p) as u32,
            ((r0 + bh) * p) as u32,
        );
        let mask = BinaryMask::from_bbox(gh * p, gw * p, &rect);
        if i == target {
            source = Some((grid.clone(), r0, c0, bh, bw));
        }
        db.push(DatabaseEntry::new(format!("entry_{i:03}"), grid, mask).unwrap())
            .unwrap();
    }
    let (src, sr, sc, bh, bw) = source.unwrap();
    let query = random_grid(rng, "query", c, p, gh, gw);
    let (qr, qc) = (rng.random_range(0..=gh - bh), rng.random_range(0..=gw - bw));
    let mut data = query.data().to_vec();
    for dr in 0..bh {
        for dc in 0..bw {
            let from = ((sr + dr) * gw + sc + dc) * c;
            let to = ((qr + dr) * gw + qc + dc) * c;
            data[to..to + c].copy_from_slice(&src.data()[from..from + c]);
        }
    }
    let query = FeatureGrid::new("query", p, (gh * p, gw * p), c, data).unwrap();
    let planted = BBox::new(
        (qc * p) as u32,
        (qr * p) as u32,
        ((qc + bw) * p) as u32,
        ((qr + bh) * p) as u32,
    );
    (query, db, planted)
}

// ----------------------------------------------------------------- metrics

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, row-major eigenvectors as columns).
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                out[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    out
}

fn spd_sqrt(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = jacobi_eigen(a, n);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n)
                .map(|k| vecs[i * n + k] * vals[k].max(0.0).sqrt() * vecs[j * n + k])
                .sum();
        }
    }
    out
}

/// Fréchet distance with the cross term from the spectrum of the
/// symmetrized product `sqrt(A) B sqrt(A)`.
pub fn fid_oracle(mu_a: &[f64], cov_a: &[f64], mu_b: &[f64], cov_b: &[f64]) -> f64 {
    let n = mu_a.len();
    let ra = spd_sqrt(cov_a, n);
    let mut m = matmul(&matmul(&ra, cov_b, n), &ra, n);
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let (vals, _) = jacobi_eigen(&m, n);
    let cross: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d2: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr: f64 = (0..n).map(|i| cov_a[i * n + i] + cov_b[i * n + i]).sum();
    d2 + tr - 2.0 * cross
}

/// Random symmetric positive definite `n x n` matrix.
pub fn random_spd<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| g[i * n + k] * g[j * n + k]).sum::<f64>();
        }
        out[i * n + i] += 0.1;
    }
    out
}

/// `exp(mean KL(p_i || marginal))` by direct double loop.
pub fn is_oracle(probs: &[Vec<f64>]) -> f64 {
    let n = probs.len();
    let c = probs[0].len();
    let mut marginal = vec![0.0; c];
    for p in probs {
        for k in 0..c {
            marginal[k] += p[k] / n as f64;
        }
    }
    let mut kl_sum = 0.0;
    for p in probs {
        for k in 0..c {
            if p[k] > 0.0 {
                kl_sum += p[k] * (p[k] / marginal[k]).ln();
            }
        }
    }
    (kl_sum / n as f64).exp()
}
