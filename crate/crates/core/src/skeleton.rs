//! 22-joint body skeleton (SMPL kinematic tree) and joint-position sequences.
//!
//! World frame is y-up; the body faces +z at rest and its left side is +x.

use crate::error::{CoreError, Result};

pub const NUM_JOINTS: usize = 22;

pub const PELVIS: usize = 0;
pub const LEFT_HIP: usize = 1;
pub const RIGHT_HIP: usize = 2;
pub const LEFT_ANKLE: usize = 7;
pub const RIGHT_ANKLE: usize = 8;
pub const LEFT_FOOT: usize = 10;
pub const RIGHT_FOOT: usize = 11;
pub const LEFT_SHOULDER: usize = 16;
pub const RIGHT_SHOULDER: usize = 17;
pub const LEFT_WRIST: usize = 20;
pub const RIGHT_WRIST: usize = 21;

/// The two hand joints, left then right.
pub const HAND_JOINTS: [usize; 2] = [LEFT_WRIST, RIGHT_WRIST];
/// Joints whose contact bits live in the motion features (l-ankle, l-foot, r-ankle, r-foot).
pub const FOOT_CONTACT_JOINTS: [usize; 4] = [LEFT_ANKLE, LEFT_FOOT, RIGHT_ANKLE, RIGHT_FOOT];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

/// Parent of each joint; the pelvis is the root.
pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
];

/// Rest pose in meters, standing at the origin and facing +z.
pub const REST_POSE: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.95, 0.0],
    [0.09, 0.90, 0.0],
    [-0.09, 0.90, 0.0],
    [0.0, 1.05, 0.0],
    [0.09, 0.50, 0.02],
    [-0.09, 0.50, 0.02],
    [0.0, 1.18, 0.0],
    [0.09, 0.08, 0.0],
    [-0.09, 0.08, 0.0],
    [0.0, 1.30, 0.0],
    [0.09, 0.02, 0.10],
    [-0.09, 0.02, 0.10],
    [0.0, 1.50, 0.0],
    [0.07, 1.45, 0.0],
    [-0.07, 1.45, 0.0],
    [0.0, 1.62, 0.02],
    [0.18, 1.43, 0.0],
    [-0.18, 1.43, 0.0],
    [0.22, 1.15, 0.0],
    [-0.22, 1.15, 0.0],
    [0.24, 0.90, 0.03],
    [-0.24, 0.90, 0.03],
];

/// Global joint positions over time, `L x J x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSequence {
    joints: usize,
    positions: Vec<[f64; 3]>,
}

impl JointSequence {
    pub fn new(frames: usize, joints: usize, positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.len() != frames * joints {
            return Err(CoreError::Shape(format!(
                "joint sequence expects {frames}x{joints} positions, got {}",
                positions.len()
            )));
        }
        if joints == 0 {
            return Err(CoreError::Shape("joint sequence needs at least one joint".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("joint positions".into()));
        }
        Ok(Self { joints, positions })
    }

    pub fn frames(&self) -> usize {
        self.positions.len() / self.joints
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn get(&self, frame: usize, joint: usize) -> [f64; 3] {
        self.positions[frame * self.joints + joint]
    }

    pub fn frame(&self, frame: usize) -> &[[f64; 3]] {
        &self.positions[frame * self.joints..(frame + 1) * self.joints]
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    /// Keeps only the listed joints, in the given order.
    pub fn select(&self, joints: &[usize]) -> Self {
        let mut positions = Vec::with_capacity(self.frames() * joints.len());
        for f in 0..self.frames() {
            for &j in joints {
                positions.push(self.get(f, j));
            }
        }
        Self { joints: joints.len(), positions }
    }

    /// The left and right hand trajectories as an `L x 2 x 3` sequence.
    pub fn hands(&self) -> Self {
        assert_eq!(self.joints, NUM_JOINTS, "hands() needs a full skeleton");
        self.select(&HAND_JOINTS)
    }

    /// Flattens to `L x (J*3)` row-major values.
    pub fn to_flat(&self) -> Vec<f64> {
        self.positions.iter().flatten().copied().collect()
    }

    pub fn from_flat(frames: usize, joints: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != frames * joints * 3 {
            return Err(CoreError::Shape(format!(
                "flat joints expect {} values, got {}",
                frames * joints * 3,
                flat.len()
            )));
        }
        let positions = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(frames, joints, positions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parents_precede_children() {
        for (j, p) in PARENTS.iter().enumerate() {
            if let Some(p) = p {
                assert!(*p < j);
            }
        }
    }

    #[test]
    fn left_side_is_positive_x() {
        assert!(REST_POSE[LEFT_WRIST][0] > 0.0 && REST_POSE[RIGHT_WRIST][0] < 0.0);
        assert_eq!(JOINT_NAMES[LEFT_WRIST], "left_wrist");
    }

    #[test]
    fn rejects_wrong_length_and_nan() {
        assert!(JointSequence::new(2, 2, vec![[0.0; 3]; 3]).is_err());
        assert!(JointSequence::new(1, 1, vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }
}
