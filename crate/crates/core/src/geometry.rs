//! Point-cloud sequences of the interaction target and their Basis Point Set
//! encoding.

use hoimotion_nn::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};

pub type Point = [f64; 3];

#[inline]
pub(crate) fn dist2(a: Point, b: Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn dist(a: Point, b: Point) -> f64 {
    dist2(a, b).sqrt()
}

pub(crate) fn centroid(points: &[Point]) -> Point {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    [c[0] / n, c[1] / n, c[2] / n]
}

/// `L` frames of `N` points each, meters, world frame (y up).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudSequence {
    points_per_frame: usize,
    coords: Vec<Point>,
}

impl PointCloudSequence {
    pub fn new(frames: usize, points_per_frame: usize, coords: Vec<Point>) -> Result<Self> {
        if frames == 0 {
            return Err(CoreError::Shape("point cloud sequence needs at least one frame".into()));
        }
        if points_per_frame == 0 {
            return Err(CoreError::EmptyPointCloud);
        }
        if coords.len() != frames * points_per_frame {
            return Err(CoreError::Shape(format!(
                "expected {frames}x{points_per_frame} points, got {}",
                coords.len()
            )));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("point cloud coordinates".into()));
        }
        Ok(Self { points_per_frame, coords })
    }

    /// Builds a sequence from per-frame point lists of equal length.
    pub fn from_frames(frames: Vec<Vec<Point>>) -> Result<Self> {
        let n = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != n) {
            return Err(CoreError::Shape("frames have different point counts".into()));
        }
        let l = frames.len();
        Self::new(l, n, frames.into_iter().flatten().collect())
    }

    pub fn frames(&self) -> usize {
        self.coords.len() / self.points_per_frame
    }

    pub fn points_per_frame(&self) -> usize {
        self.points_per_frame
    }

    pub fn frame(&self, l: usize) -> &[Point] {
        &self.coords[l * self.points_per_frame..(l + 1) * self.points_per_frame]
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn centroid(&self, l: usize) -> Point {
        centroid(self.frame(l))
    }

    /// Axis-aligned bounds `(min, max)` of frame `l`.
    pub fn bounds(&self, l: usize) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.frame(l) {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    pub fn translated(&self, t: Point) -> Self {
        let coords = self.coords.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        Self { points_per_frame: self.points_per_frame, coords }
    }

    /// The first `frames` frames.
    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames()).max(1);
        Self { points_per_frame: self.points_per_frame, coords: self.coords[..frames * self.points_per_frame].to_vec() }
    }
}

/// Fixed random points inside a ball centered at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisPointSet {
    pub points: Vec<Point>,
    pub radius: f64,
    pub seed: u64,
}

impl BasisPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Width of one encoded frame (`6` values per basis point).
    pub fn feature_width(&self) -> usize {
        6 * self.points.len()
    }
}

/// Uniform samples from the solid ball: isotropic direction times
/// `radius · u^{1/3}`.
pub fn sample_basis(seed: u64, n: usize, radius: f64) -> Result<BasisPointSet> {
    if n == 0 {
        return Err(CoreError::InvalidArgument("basis needs at least one point".into()));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(CoreError::InvalidArgument(format!("basis radius must be positive, got {radius}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let d: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let u: f64 = rng.random();
        if norm < 1e-12 {
            continue;
        }
        let r = radius * u.cbrt();
        points.push([d[0] / norm * r, d[1] / norm * r, d[2] / norm * r]);
    }
    Ok(BasisPointSet { points, radius, seed })
}

/// Indices chosen by [`downsample_cloud`].
pub fn downsample_indices(raw: &[Point], target_n: usize, seed: u64) -> Result<Vec<usize>> {
    if raw.is_empty() {
        return Err(CoreError::EmptyPointCloud);
    }
    if target_n == 0 {
        return Err(CoreError::InvalidArgument("target point count must be at least 1".into()));
    }
    let m = raw.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if m < target_n {
        let mut idx: Vec<usize> = (0..m).collect();
        idx.extend((m..target_n).map(|_| rng.random_range(0..m)));
        return Ok(idx);
    }

    // farthest-point sampling from a seeded start
    let mut selected = Vec::with_capacity(target_n);
    let mut taken = vec![false; m];
    let mut nearest = vec![f64::INFINITY; m];
    let mut current = rng.random_range(0..m);
    for _ in 0..target_n {
        selected.push(current);
        taken[current] = true;
        let c = raw[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..m {
            if taken[i] {
                continue;
            }
            let d = dist2(raw[i], c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    refine_dispersion(raw, &mut selected, &mut taken);
    Ok(selected)
}

const MAX_REFINE_SWAPS: usize = 64;

/// Greedy swap pass on the max-min dispersion of the selection: while every
/// closest pair shares one point, try replacing that point with the
/// unselected point that maximizes the new minimum spacing.
fn refine_dispersion(raw: &[Point], selected: &mut [usize], taken: &mut [bool]) {
    let n = selected.len();
    if n < 2 {
        return;
    }
    for _ in 0..MAX_REFINE_SWAPS {
        let mut dmin = f64::INFINITY;
        let mut count = vec![0usize; n];
        let mut pairs = 0usize;
        for a in 0..n {
            for b in a + 1..n {
                let d = dist2(raw[selected[a]], raw[selected[b]]);
                if d < dmin {
                    dmin = d;
                    count.iter_mut().for_each(|c| *c = 0);
                    pairs = 0;
                }
                if d == dmin {
                    count[a] += 1;
                    count[b] += 1;
                    pairs += 1;
                }
            }
        }
        let Some(victim) = (0..n).find(|&k| count[k] == pairs) else { return };

        let mut rest_min = f64::INFINITY;
        for a in 0..n {
            for b in a + 1..n {
                if a != victim && b != victim {
                    rest_min = rest_min.min(dist2(raw[selected[a]], raw[selected[b]]));
                }
            }
        }
        let mut best = None;
        let mut best_d = dmin;
        for (i, p) in raw.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let md = selected
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != victim)
                .map(|(_, &s)| dist2(*p, raw[s]))
                .fold(f64::INFINITY, f64::min);
            let new_min = md.min(rest_min);
            if new_min > best_d {
                best_d = new_min;
                best = Some(i);
            }
        }
        match best {
            Some(i) => {
                taken[selected[victim]] = false;
                taken[i] = true;
                selected[victim] = i;
            }
            None => return,
        }
    }
}

/// Reduces (or pads) a raw cloud to `target_n` rows taken from the input.
///
/// With enough input points this is farthest-point sampling followed by a
/// dispersion-improving swap pass; with too few, every input point is kept
/// and the remainder is drawn with replacement.
pub fn downsample_cloud(raw: &[Point], target_n: usize, seed: u64) -> Result<Vec<Point>> {
    Ok(downsample_indices(raw, target_n, seed)?.into_iter().map(|i| raw[i]).collect())
}

/// One frame of BPS features.
#[derive(Clone, Debug, PartialEq)]
pub struct BpsFrame {
    /// Per basis point: nearest cloud point minus the basis point.
    pub offsets: Vec<Point>,
    /// Mean of the cloud points.
    pub centroid: Point,
}

impl BpsFrame {
    /// Row-major `N x 6` values: `[offset, centroid]` per basis point.
    pub fn to_features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.offsets.len() * 6);
        for o in &self.offsets {
            out.extend_from_slice(o);
            out.extend_from_slice(&self.centroid);
        }
        out
    }
}

pub fn bps_encode(frame: &[Point], basis: &BasisPointSet) -> Result<BpsFrame> {
    if frame.is_empty() {
        return Err(CoreError::EmptyPointCloud);
    }
    let offsets = basis
        .points
        .iter()
        .map(|&b| {
            let mut best = frame[0];
            let mut best_d = dist2(best, b);
            for &p in &frame[1..] {
                let d = dist2(p, b);
                if d < best_d {
                    best_d = d;
                    best = p;
                }
            }
            [best[0] - b[0], best[1] - b[1], best[2] - b[2]]
        })
        .collect();
    Ok(BpsFrame { offsets, centroid: centroid(frame) })
}

/// Per-frame BPS features, `L x (N_basis * 6)`.
pub fn encode_sequence(seq: &PointCloudSequence, basis: &BasisPointSet) -> Result<Matrix> {
    let width = basis.feature_width();
    let mut data = Vec::with_capacity(seq.frames() * width);
    for l in 0..seq.frames() {
        data.extend(bps_encode(seq.frame(l), basis)?.to_features());
    }
    Ok(Matrix::from_vec(seq.frames(), width, data))
}
