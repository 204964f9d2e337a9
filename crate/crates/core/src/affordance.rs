//! Point-to-joint distance fields, affordance maps and contact masks.

use crate::error::{CoreError, Result};
use crate::geometry::{dist, PointCloudSequence};
use crate::skeleton::JointSequence;

/// Default normalizing factor of the affordance kernel (meters).
pub const DEFAULT_SIGMA: f64 = 0.2;
/// Default contact threshold (meters).
pub const DEFAULT_TAU: f64 = 0.10;

/// `L x N x J` Euclidean distances between cloud points and joints.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub frames: usize,
    pub points: usize,
    pub joints: usize,
    pub values: Vec<f64>,
}

impl DistanceMap {
    #[inline]
    pub fn get(&self, l: usize, n: usize, j: usize) -> f64 {
        self.values[(l * self.points + n) * self.joints + j]
    }

    /// Distance from joint `j` to its nearest cloud point in frame `l`.
    pub fn nearest(&self, l: usize, j: usize) -> f64 {
        (0..self.points).map(|n| self.get(l, n, j)).fold(f64::INFINITY, f64::min)
    }
}

/// `L x N x J` contact-proximity field in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffordanceMap {
    pub frames: usize,
    pub points: usize,
    pub joints: usize,
    pub values: Vec<f64>,
    pub sigma: f64,
}

impl AffordanceMap {
    #[inline]
    pub fn get(&self, l: usize, n: usize, j: usize) -> f64 {
        self.values[(l * self.points + n) * self.joints + j]
    }

    /// Per-point maximum over the joints, `L x N` row-major.
    pub fn reduce_max(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.frames * self.points);
        for l in 0..self.frames {
            for n in 0..self.points {
                out.push((0..self.joints).map(|j| self.get(l, n, j)).fold(0.0, f64::max));
            }
        }
        out
    }
}

/// Per-frame, per-joint contact flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactMask {
    pub frames: usize,
    pub joints: usize,
    pub values: Vec<bool>,
    pub tau: f64,
}

impl ContactMask {
    #[inline]
    pub fn get(&self, l: usize, j: usize) -> bool {
        self.values[l * self.joints + j]
    }

    pub fn any_in_frame(&self, l: usize) -> bool {
        (0..self.joints).any(|j| self.get(l, j))
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

pub fn distance_map(cloud: &PointCloudSequence, joints: &JointSequence) -> Result<DistanceMap> {
    if cloud.frames() != joints.frames() {
        return Err(CoreError::Shape(format!(
            "cloud has {} frames but joints have {}",
            cloud.frames(),
            joints.frames()
        )));
    }
    let (l, n, j) = (cloud.frames(), cloud.points_per_frame(), joints.joints());
    let mut values = Vec::with_capacity(l * n * j);
    for f in 0..l {
        let js = joints.frame(f);
        for &p in cloud.frame(f) {
            values.extend(js.iter().map(|&q| dist(p, q)));
        }
    }
    Ok(DistanceMap { frames: l, points: n, joints: j, values })
}

/// `exp(-0.5 · d / σ²)` applied to the raw distance.
pub fn affordance_from_distance(d: &DistanceMap, sigma: f64) -> Result<AffordanceMap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(CoreError::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let k = -0.5 / (sigma * sigma);
    Ok(AffordanceMap {
        frames: d.frames,
        points: d.points,
        joints: d.joints,
        values: d.values.iter().map(|&v| (k * v).exp()).collect(),
        sigma,
    })
}

/// Contact where the nearest cloud point is within `tau` (inclusive).
pub fn contact_mask(joints: &JointSequence, cloud: &PointCloudSequence, tau: f64) -> Result<ContactMask> {
    if !(tau > 0.0) {
        return Err(CoreError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if cloud.frames() != joints.frames() {
        return Err(CoreError::Shape(format!(
            "cloud has {} frames but joints have {}",
            cloud.frames(),
            joints.frames()
        )));
    }
    let mut values = Vec::with_capacity(joints.frames() * joints.joints());
    for f in 0..joints.frames() {
        let pts = cloud.frame(f);
        for &q in joints.frame(f) {
            let nearest = pts.iter().map(|&p| dist(p, q)).fold(f64::INFINITY, f64::min);
            values.push(nearest <= tau);
        }
    }
    Ok(ContactMask { frames: joints.frames(), joints: joints.joints(), values, tau })
}

/// Hand affordance reduced to one value per point: max over the given joints
/// of the affordance kernel, `L x N` row-major.
pub fn reduced_affordance(cloud: &PointCloudSequence, joints: &JointSequence, sigma: f64) -> Result<Vec<f64>> {
    let d = distance_map(cloud, joints)?;
    Ok(affordance_from_distance(&d, sigma)?.reduce_max())
}
