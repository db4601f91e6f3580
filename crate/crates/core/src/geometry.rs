//! Boundary-enhanced pseudo masks: random convex polygons inscribed in a
//! lesion box, their rasterization, and the three ways a training pair's
//! mask is drawn.

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{BBox, BinaryMask, GrayImage};
use crate::synth::{DatasetSample, Label, Prompt};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// `(b - a) x (c - a)`; positive for a counter-clockwise turn in x-right/y-up axes.
#[inline]
pub fn cross(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Strictly convex polygon, vertices in counter-clockwise order
/// (with respect to x-right/y-up axes).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    /// Accepts vertices in either winding; rejects anything that is not
    /// strictly convex.
    pub fn new(mut vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::arg("polygon needs at least 3 vertices"));
        }
        let n = vertices.len();
        let turns: Vec<f64> = (0..n)
            .map(|i| cross(vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]))
            .collect();
        let ccw = turns.iter().all(|&t| t > 0.0);
        let cw = turns.iter().all(|&t| t < 0.0);
        if !(ccw || cw) {
            return Err(Error::arg("polygon is not strictly convex"));
        }
        // a star polygon has all turns the same sign but winds more than once
        let winding: f64 = (0..n)
            .map(|i| {
                let (a, b, c) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
                let (u, v) = ((b.x - a.x, b.y - a.y), (c.x - b.x, c.y - b.y));
                (u.0 * v.1 - u.1 * v.0).atan2(u.0 * v.0 + u.1 * v.1)
            })
            .sum();
        if (winding.abs() - std::f64::consts::TAU).abs() > 1e-6 {
            return Err(Error::arg("polygon is self-intersecting"));
        }
        if cw {
            vertices.reverse();
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        0.5 * (0..n)
            .map(|i| {
                let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
                a.x * b.y - b.x * a.y
            })
            .sum::<f64>()
            .abs()
    }

    /// Boundary-inclusive containment test.
    pub fn contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| cross(self.vertices[i], self.vertices[(i + 1) % n], p) >= 0.0)
    }

    pub fn centroid(&self) -> Point {
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / n, sy / n)
    }
}

/// Andrew's monotone chain; drops collinear points. Output is counter-clockwise.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Knobs of the pseudo-mask generator.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    /// Inclusive range for the number of polygon vertices drawn per mask.
    pub vertex_range: (usize, usize),
    /// Per-vertex radius as a fraction of the inscribed ellipse radius.
    pub radius_range: (f64, f64),
    pub min_area_fraction: f64,
    /// Rectangle side as a fraction of the image side.
    pub rect_side_range: (f64, f64),
    pub placement_retries: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            vertex_range: (5, 12),
            radius_range: (0.4, 0.95),
            min_area_fraction: 0.1,
            rect_side_range: (0.1, 0.4),
            placement_retries: 20,
        }
    }
}

const POLYGON_ATTEMPTS: usize = 10_000;

pub fn sample_inscribed_convex_polygon<R: Rng + ?Sized>(
    bbox: &BBox,
    n_vertices: usize,
    rng: &mut R,
) -> Result<Polygon> {
    sample_polygon_with(bbox, n_vertices, &MaskConfig::default(), rng)
}

/// Angles uniform and sorted, radii uniform within `cfg.radius_range` of the
/// ellipse inscribed in `bbox`; the convex hull is kept when it still has at
/// least three vertices and covers `cfg.min_area_fraction` of the box.
pub fn sample_polygon_with<R: Rng + ?Sized>(
    bbox: &BBox,
    n_vertices: usize,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<Polygon> {
    if n_vertices < 3 {
        return Err(Error::arg(format!("need at least 3 vertices, got {n_vertices}")));
    }
    if bbox.is_degenerate() {
        return Err(Error::arg(format!("degenerate bbox {bbox:?}")));
    }
    let (r_lo, r_hi) = cfg.radius_range;
    if !(0.0 < r_lo && r_lo <= r_hi && r_hi < 1.0) {
        return Err(Error::arg("radius range must satisfy 0 < lo <= hi < 1"));
    }
    let cx = 0.5 * f64::from(bbox.x0 + bbox.x1);
    let cy = 0.5 * f64::from(bbox.y0 + bbox.y1);
    let ax = 0.5 * f64::from(bbox.width());
    let ay = 0.5 * f64::from(bbox.height());
    let min_area = cfg.min_area_fraction * bbox.area() as f64;

    for _ in 0..POLYGON_ATTEMPTS {
        let mut angles: Vec<f64> = (0..n_vertices)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let pts: Vec<Point> = angles
            .iter()
            .map(|&t| {
                let r = if r_lo == r_hi {
                    r_lo
                } else {
                    rng.random_range(r_lo..r_hi)
                };
                Point::new(cx + r * ax * t.cos(), cy + r * ay * t.sin())
            })
            .collect();
        let hull = convex_hull(&pts);
        if hull.len() < 3 {
            continue;
        }
        if let Ok(poly) = Polygon::new(hull) {
            if poly.area() >= min_area {
                return Ok(poly);
            }
        }
    }
    Err(Error::Placement(format!(
        "no admissible polygon in {bbox:?} after {POLYGON_ATTEMPTS} attempts"
    )))
}

/// Scanline fill: a pixel is set iff its center lies in the polygon,
/// boundary included.
pub fn rasterize_polygon(poly: &Polygon, height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(height, width);
    let v = poly.vertices();
    let n = v.len();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let (p, q) = (v[i], v[(i + 1) % n]);
            if yc < p.y.min(q.y) || yc > p.y.max(q.y) {
                continue;
            }
            if p.y == q.y {
                lo = lo.min(p.x.min(q.x));
                hi = hi.max(p.x.max(q.x));
            } else {
                let x = p.x + (yc - p.y) * (q.x - p.x) / (q.y - p.y);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if lo > hi {
            continue;
        }
        // centers x + 0.5 in [lo, hi]
        let first = (lo - 0.5).ceil().max(0.0);
        let last = (hi - 0.5).floor().min(width as f64 - 1.0);
        if first > last {
            continue;
        }
        for x in first as usize..=last as usize {
            mask.set(y, x, true);
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub prompt: Prompt,
}

/// Draws the mask for one training example:
///
/// * `Polyp` prompt: rasterized convex polygon inscribed in the lesion box.
/// * `Normal` prompt on a lesion image: rectangle disjoint from the box.
/// * `Normal` prompt on a normal image: rectangle anywhere.
pub fn sample_training_pair<R: Rng + ?Sized>(
    sample: &DatasetSample,
    prompt: Prompt,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<TrainingPair> {
    let (h, w) = sample.image.dims();
    let mask = match (prompt, sample.label, sample.bbox) {
        (Label::Polyp, Label::Polyp, Some(bbox)) => polygon_mask(&bbox, h, w, cfg, rng)?,
        (Label::Polyp, _, _) => {
            return Err(Error::arg(format!(
                "{}: polyp prompt requires a polyp sample",
                sample.image_id
            )))
        }
        (Label::Normal, _, bbox) => {
            let mut placed = None;
            for _ in 0..cfg.placement_retries.max(1) {
                let r = random_rect(h, w, cfg, rng);
                if bbox.is_none_or(|b| !r.intersects(&b)) {
                    placed = Some(r);
                    break;
                }
            }
            let r = placed.ok_or_else(|| {
                Error::Placement(format!(
                    "{}: no rectangle outside {:?} after {} tries",
                    sample.image_id, bbox, cfg.placement_retries
                ))
            })?;
            BinaryMask::from_bbox(h, w, &r)
        }
    };
    Ok(TrainingPair {
        image: sample.image.clone(),
        mask,
        prompt,
    })
}

fn polygon_mask<R: Rng + ?Sized>(bbox: &BBox, h: usize, w: usize, cfg: &MaskConfig, rng: &mut R) -> Result<BinaryMask> {
    let (lo, hi) = cfg.vertex_range;
    let n = rng.random_range(lo.max(3)..=hi.max(lo.max(3)));
    let poly = sample_polygon_with(bbox, n, cfg, rng)?;
    let mut mask = rasterize_polygon(&poly, h, w);
    if mask.is_empty() {
        // polygon too thin to cover a pixel center: fall back to the centroid pixel
        let c = poly.centroid();
        let x = (c.x.floor() as usize).clamp(bbox.x0 as usize, bbox.x1 as usize - 1);
        let y = (c.y.floor() as usize).clamp(bbox.y0 as usize, bbox.y1 as usize - 1);
        mask.set(y.min(h - 1), x.min(w - 1), true);
    }
    Ok(mask)
}

fn random_rect<R: Rng + ?Sized>(h: usize, w: usize, cfg: &MaskConfig, rng: &mut R) -> BBox {
    let (lo, hi) = cfg.rect_side_range;
    let side = |n: usize, rng: &mut R| -> usize {
        let f = if lo < hi { rng.random_range(lo..hi) } else { lo };
        ((f * n as f64).round() as usize).clamp(1, n)
    };
    let rw = side(w, rng);
    let rh = side(h, rng);
    let x0 = rng.random_range(0..=w - rw);
    let y0 = rng.random_range(0..=h - rh);
    BBox::new(x0 as u32, y0 as u32, (x0 + rw) as u32, (y0 + rh) as u32)
}
