//! 263-dimensional per-frame motion features and their inversion to global
//! joint positions.
//!
//! Layout per frame (offsets into the feature row):
//!
//! | range     | content                                                   |
//! |-----------|-----------------------------------------------------------|
//! | 0         | root yaw velocity (rad/s)                                 |
//! | 1..3      | root xz velocity in the root-facing frame (m/s)           |
//! | 3         | root height (m)                                           |
//! | 4..67     | 21 joint positions relative to the root, root-facing frame|
//! | 67..193   | 21 joint rotations, 6D (first two rotation-matrix columns)|
//! | 193..259  | 22 joint velocities in the root-facing frame (m/s)        |
//! | 259..263  | foot contact bits: l-ankle, l-foot, r-ankle, r-foot       |
//!
//! Velocities of the last frame are zero. Recovery integrates the yaw and
//! root velocity from a root that starts at the xz origin facing +z.

use hoimotion_nn::{Graph, Matrix, Var};

use crate::error::{CoreError, Result};
use crate::skeleton::{
    JointSequence, FOOT_CONTACT_JOINTS, LEFT_HIP, LEFT_SHOULDER, NUM_JOINTS, PARENTS, REST_POSE,
    RIGHT_HIP, RIGHT_SHOULDER,
};

pub const FEATURE_DIM: usize = 263;
pub const ROOT_YAW_VEL: usize = 0;
pub const ROOT_VEL: usize = 1;
pub const ROOT_HEIGHT: usize = 3;
pub const RIC: usize = 4;
pub const ROT: usize = 67;
pub const LOCAL_VEL: usize = 193;
pub const FOOT_CONTACT: usize = 259;

/// Per-frame foot displacement below which a foot counts as planted (m/frame).
pub const FOOT_STILL_THRESHOLD: f64 = 0.01;

/// Motion clip as per-frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub features: Matrix,
    pub fps: f64,
}

impl MotionSequence {
    pub fn new(features: Matrix, fps: f64) -> Result<Self> {
        if features.cols() != FEATURE_DIM {
            return Err(CoreError::Shape(format!(
                "motion features need {FEATURE_DIM} columns, got {}",
                features.cols()
            )));
        }
        if features.rows() == 0 {
            return Err(CoreError::Shape("motion needs at least one frame".into()));
        }
        if !(fps > 0.0) {
            return Err(CoreError::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        if !features.is_finite() {
            return Err(CoreError::NonFinite("motion features".into()));
        }
        Ok(Self { features, fps })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// Foot contact bits of `frame`, thresholded at 0.5.
    pub fn foot_contacts(&self, frame: usize) -> [bool; 4] {
        let row = self.features.row(frame);
        std::array::from_fn(|k| row[FOOT_CONTACT + k] > 0.5)
    }

    /// Snaps the contact channels to exactly 0 or 1.
    pub fn binarize_contacts(&mut self) {
        for f in 0..self.frames() {
            for k in 0..4 {
                let v = self.features.get(f, FOOT_CONTACT + k);
                self.features.set(f, FOOT_CONTACT + k, if v > 0.5 { 1.0 } else { 0.0 });
            }
        }
    }
}

#[inline]
fn to_world(theta: f64, x: f64, z: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x + s * z, -s * x + c * z)
}

#[inline]
fn to_local(theta: f64, x: f64, z: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x - s * z, s * x + c * z)
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = a % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a < -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

/// Facing yaw of one frame from the hip and shoulder axes; 0 means facing +z.
pub fn facing_yaw(frame: &[[f64; 3]]) -> f64 {
    let ax = frame[LEFT_HIP][0] - frame[RIGHT_HIP][0] + frame[LEFT_SHOULDER][0] - frame[RIGHT_SHOULDER][0];
    let az = frame[LEFT_HIP][2] - frame[RIGHT_HIP][2] + frame[LEFT_SHOULDER][2] - frame[RIGHT_SHOULDER][2];
    // forward = across × up
    (-az).atan2(ax)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        [0.0, 1.0, 0.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Shortest-arc rotation taking unit `from` onto unit `to`, as the 6D
/// representation `[c0x, c0y, c0z, c1x, c1y, c1z]` of its first two columns.
fn shortest_arc_6d(from: [f64; 3], to: [f64; 3]) -> [f64; 6] {
    let c = dot(from, to);
    let axis = cross(from, to);
    let s = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let m: [[f64; 3]; 3] = if s < 1e-9 {
        if c > 0.0 {
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        } else {
            // half turn about any axis orthogonal to `from`
            let helper = if from[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let k = normalize(cross(from, helper));
            let mut m = [[0.0; 3]; 3];
            for (i, row) in m.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = 2.0 * k[i] * k[j] - if i == j { 1.0 } else { 0.0 };
                }
            }
            m
        }
    } else {
        // Rodrigues with k = axis / s, sinθ = s, cosθ = c
        let k = [axis[0] / s, axis[1] / s, axis[2] / s];
        let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let kk: f64 = (0..3).map(|l| kx[i][l] * kx[l][j]).sum();
                m[i][j] = if i == j { 1.0 } else { 0.0 } + s * kx[i][j] + (1.0 - c) * kk;
            }
        }
        m
    };
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Encodes global joint positions (22 joints) into motion features.
///
/// Foot contact bits are set where the foot joint moves less than
/// [`FOOT_STILL_THRESHOLD`] to the next frame.
pub fn encode_motion(joints: &JointSequence, fps: f64) -> Result<MotionSequence> {
    if joints.joints() != NUM_JOINTS {
        return Err(CoreError::Shape(format!("encoding needs {NUM_JOINTS} joints, got {}", joints.joints())));
    }
    let l = joints.frames();
    if l == 0 {
        return Err(CoreError::Shape("encoding needs at least one frame".into()));
    }
    let yaw: Vec<f64> = (0..l).map(|f| facing_yaw(joints.frame(f))).collect();
    let mut feats = Matrix::zeros(l, FEATURE_DIM);
    for f in 0..l {
        let frame = joints.frame(f);
        let root = frame[0];
        let theta = yaw[f];
        let row = feats.row_mut(f);
        if f + 1 < l {
            row[ROOT_YAW_VEL] = wrap_angle(yaw[f + 1] - theta) * fps;
            let next = joints.get(f + 1, 0);
            let (vx, vz) = to_local(theta, next[0] - root[0], next[2] - root[2]);
            row[ROOT_VEL] = vx * fps;
            row[ROOT_VEL + 1] = vz * fps;
        }
        row[ROOT_HEIGHT] = root[1];
        for j in 1..NUM_JOINTS {
            let p = frame[j];
            let (x, z) = to_local(theta, p[0] - root[0], p[2] - root[2]);
            let o = RIC + 3 * (j - 1);
            row[o] = x;
            row[o + 1] = p[1];
            row[o + 2] = z;

            let parent = PARENTS[j].expect("non-root joint has a parent");
            let q = frame[parent];
            let (bx, bz) = to_local(theta, p[0] - q[0], p[2] - q[2]);
            let bone = normalize([bx, p[1] - q[1], bz]);
            let r = REST_POSE[j];
            let rp = REST_POSE[parent];
            let rest = normalize([r[0] - rp[0], r[1] - rp[1], r[2] - rp[2]]);
            let six = shortest_arc_6d(rest, bone);
            row[ROT + 6 * (j - 1)..ROT + 6 * j].copy_from_slice(&six);
        }
        if f + 1 < l {
            let next = joints.frame(f + 1);
            for j in 0..NUM_JOINTS {
                let (x, z) = to_local(theta, next[j][0] - frame[j][0], next[j][2] - frame[j][2]);
                let o = LOCAL_VEL + 3 * j;
                row[o] = x * fps;
                row[o + 1] = (next[j][1] - frame[j][1]) * fps;
                row[o + 2] = z * fps;
            }
        }
    }
    for (k, &j) in FOOT_CONTACT_JOINTS.iter().enumerate() {
        for f in 0..l {
            let g = if f + 1 < l { f } else { f.saturating_sub(1) };
            let a = joints.get(g, j);
            let b = joints.get((g + 1).min(l - 1), j);
            let d = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
            feats.set(f, FOOT_CONTACT + k, if d < FOOT_STILL_THRESHOLD { 1.0 } else { 0.0 });
        }
    }
    MotionSequence::new(feats, fps)
}

/// Integrates the root trajectory: per-frame yaw and xz position.
fn root_trajectory(features: &Matrix, fps: f64) -> (Vec<f64>, Vec<[f64; 2]>) {
    let l = features.rows();
    let mut yaw = vec![0.0; l];
    let mut pos = vec![[0.0; 2]; l];
    for f in 1..l {
        let prev = features.row(f - 1);
        yaw[f] = yaw[f - 1] + prev[ROOT_YAW_VEL] / fps;
        let (dx, dz) = to_world(yaw[f - 1], prev[ROOT_VEL] / fps, prev[ROOT_VEL + 1] / fps);
        pos[f] = [pos[f - 1][0] + dx, pos[f - 1][1] + dz];
    }
    (yaw, pos)
}

/// Global joint positions recovered from motion features.
pub fn recover_joints(motion: &MotionSequence) -> JointSequence {
    let feats = &motion.features;
    let (yaw, pos) = root_trajectory(feats, motion.fps);
    let l = feats.rows();
    let mut out = Vec::with_capacity(l * NUM_JOINTS);
    for f in 0..l {
        let row = feats.row(f);
        out.push([pos[f][0], row[ROOT_HEIGHT], pos[f][1]]);
        for j in 1..NUM_JOINTS {
            let o = RIC + 3 * (j - 1);
            let (x, z) = to_world(yaw[f], row[o], row[o + 2]);
            out.push([x + pos[f][0], row[o + 1], z + pos[f][1]]);
        }
    }
    JointSequence::new(l, NUM_JOINTS, out).expect("recovered joints have a consistent shape")
}

/// Joint coordinates recorded on a tape, each `L x 22`.
#[derive(Clone, Copy, Debug)]
pub struct JointVars {
    pub x: Var,
    pub y: Var,
    pub z: Var,
}

/// Differentiable [`recover_joints`]: `features` is an `L x 263` node of raw
/// (denormalized) features.
pub fn recover_joints_graph(g: &mut Graph, features: Var, fps: f64) -> JointVars {
    let inv_fps = 1.0 / fps;
    let yaw_vel = g.slice_cols(features, ROOT_YAW_VEL, 1);
    let yaw = g.cumsum_exclusive(yaw_vel);
    let yaw = g.scale(yaw, inv_fps);
    let sin = g.sin(yaw);
    let cos = g.cos(yaw);

    let vx = g.slice_cols(features, ROOT_VEL, 1);
    let vz = g.slice_cols(features, ROOT_VEL + 1, 1);
    let (cx, sz) = (g.mul(cos, vx), g.mul(sin, vz));
    let dx = g.add(cx, sz);
    let (sx, cz) = (g.mul(sin, vx), g.mul(cos, vz));
    let dz = g.sub(cz, sx);
    // yaw[f-1] pairs with velocity[f-1], so integrate the per-frame steps
    let px = g.cumsum_exclusive(dx);
    let px = g.scale(px, inv_fps);
    let pz = g.cumsum_exclusive(dz);
    let pz = g.scale(pz, inv_fps);

    let xi: Vec<usize> = (1..NUM_JOINTS).map(|j| RIC + 3 * (j - 1)).collect();
    let yi: Vec<usize> = xi.iter().map(|i| i + 1).collect();
    let zi: Vec<usize> = xi.iter().map(|i| i + 2).collect();
    let lx = g.select_cols(features, &xi);
    let ly = g.select_cols(features, &yi);
    let lz = g.select_cols(features, &zi);

    let a = g.mul_col(lx, cos);
    let b = g.mul_col(lz, sin);
    let wx = g.add(a, b);
    let wx = g.add_col(wx, px);
    let a = g.mul_col(lz, cos);
    let b = g.mul_col(lx, sin);
    let wz = g.sub(a, b);
    let wz = g.add_col(wz, pz);

    let root_y = g.slice_cols(features, ROOT_HEIGHT, 1);
    JointVars {
        x: g.concat_cols(&[px, wx]),
        y: g.concat_cols(&[root_y, ly]),
        z: g.concat_cols(&[pz, wz]),
    }
}

/// Per-channel affine normalization of motion features.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNormalizer {
    pub const STD_FLOOR: f64 = 1e-2;

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Fits channel statistics over every frame of every motion.
    pub fn fit<'a>(motions: impl IntoIterator<Item = &'a Matrix>) -> Result<Self> {
        let mut sum = vec![0.0; FEATURE_DIM];
        let mut sq = vec![0.0; FEATURE_DIM];
        let mut n = 0usize;
        for m in motions {
            for r in 0..m.rows() {
                for (c, &v) in m.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(CoreError::InvalidArgument("cannot fit a normalizer on no frames".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / nf - m * m).max(0.0).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        out
    }

    pub fn denormalize(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + mu;
            }
        }
        out
    }

    /// Denormalization recorded on a tape.
    pub fn denormalize_graph(&self, g: &mut Graph, x: Var) -> Var {
        let std = g.constant(Matrix::row_vector(self.std.clone()));
        let mean = g.constant(Matrix::row_vector(self.mean.clone()));
        let y = g.mul_row(x, std);
        g.add_row(y, mean)
    }
}
