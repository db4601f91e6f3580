//! Exact DBSCAN over pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NOISE: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Neighborhood radius in pixels (inclusive).
    pub eps_radius: f64,
    /// Neighbors, counting the point itself, needed for a core point.
    pub min_points: usize,
}

impl ClusterParams {
    pub const DEFAULT_MIN_POINTS: usize = 3;

    /// Radius `2P + 1` for patch size `P`.
    pub fn for_patch_size(patch_size: usize) -> Self {
        Self {
            eps_radius: (2 * patch_size + 1) as f64,
            min_points: Self::DEFAULT_MIN_POINTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_radius > 0.0) || !self.eps_radius.is_finite() {
            return Err(Error::arg(format!(
                "cluster radius must be positive, got {}",
                self.eps_radius
            )));
        }
        if self.min_points == 0 {
            return Err(Error::arg("min_points must be at least 1"));
        }
        Ok(())
    }
}

fn region(points: &[(f64, f64)], i: usize, eps2: f64) -> Vec<usize> {
    let (x, y) = points[i];
    points
        .iter()
        .enumerate()
        .filter(|(_, &(px, py))| (px - x) * (px - x) + (py - y) * (py - y) <= eps2)
        .map(|(j, _)| j)
        .collect()
}

/// Labels each point with its cluster index (0, 1, ... in order of the
/// seeding point) or [`NOISE`]. Clusters are grown breadth-first from points
/// in input order, so the result depends only on the input sequence.
pub fn dbscan(points: &[(f64, f64)], params: &ClusterParams) -> Result<Vec<i32>> {
    params.validate()?;
    const UNVISITED: i32 = -2;
    let eps2 = params.eps_radius * params.eps_radius;
    let mut labels = vec![UNVISITED; points.len()];
    let mut next = 0;
    for i in 0..points.len() {
        if labels[i] != UNVISITED {
            continue;
        }
        let seeds = region(points, i, eps2);
        if seeds.len() < params.min_points {
            labels[i] = NOISE;
            continue;
        }
        let cluster = next;
        next += 1;
        labels[i] = cluster;
        let mut queue = std::collections::VecDeque::from(seeds);
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                // border point reached from a core point
                labels[j] = cluster;
                continue;
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = cluster;
            let nb = region(points, j, eps2);
            if nb.len() >= params.min_points {
                queue.extend(nb);
            }
        }
    }
    Ok(labels)
}
