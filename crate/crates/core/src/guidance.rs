//! Sampling-time objectives: hand-target alignment and foot stability.
//!
//! Each loss has a plain version over positions and a tape version over the
//! [`JointVars`] produced by [`recover_joints_graph`](crate::motion::recover_joints_graph).

use hoimotion_nn::{Graph, Matrix, Var};
use serde::{Deserialize, Serialize};

use crate::affordance::ContactMask;
use crate::error::{CoreError, Result};
use crate::motion::{recover_joints, JointVars, MotionSequence};
use crate::skeleton::{JointSequence, HAND_JOINTS, LEFT_FOOT, NUM_JOINTS, RIGHT_FOOT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceWeights {
    /// Weight of the contact-velocity penalty.
    pub alpha: f64,
    /// Weight of the contact-acceleration penalty.
    pub beta: f64,
    /// Ground height (m).
    pub h_g: f64,
    pub lbfgs_iters: usize,
    /// Multiplier of the hand-target loss; 0 disables it.
    pub joint_weight: f64,
    /// Multiplier of the foot loss; 0 disables it.
    pub foot_weight: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, h_g: 0.02, lbfgs_iters: 5, joint_weight: 1.0, foot_weight: 1.0 }
    }
}

impl GuidanceWeights {
    pub fn disabled() -> Self {
        Self { joint_weight: 0.0, foot_weight: 0.0, ..Self::default() }
    }

    pub fn is_active(&self) -> bool {
        self.lbfgs_iters > 0 && (self.joint_weight != 0.0 || self.foot_weight != 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.alpha, self.beta, self.h_g, self.joint_weight, self.foot_weight];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Config("guidance weights must be finite".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.joint_weight < 0.0 || self.foot_weight < 0.0 {
            return Err(CoreError::Config("guidance weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn hand_positions(pred: &JointSequence) -> Result<JointSequence> {
    match pred.joints() {
        2 => Ok(pred.clone()),
        NUM_JOINTS => Ok(pred.select(&HAND_JOINTS)),
        j => Err(CoreError::Shape(format!("expected 2 or {NUM_JOINTS} joints, got {j}"))),
    }
}

/// Frames with at least one guided hand in contact.
pub fn masked_frame_count(mask: &ContactMask) -> usize {
    (0..mask.frames).filter(|&l| mask.any_in_frame(l)).count()
}

/// Masked mean hand-to-target distance, normalized by
/// (guided hands × frames with any contact). Zero when nothing is masked.
pub fn joint_guidance_loss(pred: &JointSequence, target: &JointSequence, mask: &ContactMask) -> Result<f64> {
    let hands = hand_positions(pred)?;
    if target.joints() != 2 || mask.joints != 2 {
        return Err(CoreError::Shape("target and mask must cover the two hands".into()));
    }
    if hands.frames() != target.frames() || mask.frames != target.frames() {
        return Err(CoreError::Shape("frame counts differ".into()));
    }
    let frames = masked_frame_count(mask);
    if frames == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for l in 0..target.frames() {
        for k in 0..2 {
            if mask.get(l, k) {
                let (a, b) = (hands.get(l, k), target.get(l, k));
                sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            }
        }
    }
    Ok(sum / (2 * frames) as f64)
}

/// Tape version of [`joint_guidance_loss`] on recovered joints.
pub fn joint_guidance_loss_graph(g: &mut Graph, joints: JointVars, target: &JointSequence, mask: &ContactMask) -> Var {
    let frames = masked_frame_count(mask);
    if frames == 0 {
        return g.constant(Matrix::scalar(0.0));
    }
    let len = target.frames();
    let mut terms = Vec::new();
    for (k, &j) in HAND_JOINTS.iter().enumerate() {
        let mut sq = None;
        for (axis, coord) in [joints.x, joints.y, joints.z].into_iter().enumerate() {
            let p = g.select_cols(coord, &[j]);
            let t = g.constant(Matrix::column_vector((0..len).map(|l| target.get(l, k)[axis]).collect()));
            let d = g.sub(p, t);
            let d2 = g.square(d);
            sq = Some(match sq {
                None => d2,
                Some(acc) => g.add(acc, d2),
            });
        }
        let dist = g.sqrt(sq.expect("three axes"));
        let m = g.constant(Matrix::column_vector((0..len).map(|l| if mask.get(l, k) { 1.0 } else { 0.0 }).collect()));
        terms.push(g.mul(dist, m));
    }
    let both = g.concat_cols(&terms);
    let s = g.sum(both);
    g.scale(s, 1.0 / (2 * frames) as f64)
}

/// Per-frame planted flags of the left and right foot from the contact channels.
pub fn foot_contact_flags(motion: &MotionSequence) -> Vec<[bool; 2]> {
    (0..motion.frames())
        .map(|f| {
            let c = motion.foot_contacts(f);
            [c[1], c[3]]
        })
        .collect()
}

/// Foot-stability loss over global joints, using per-frame planted flags.
///
/// `(1/L) Σ_i [(min(h_l, h_r) − h_g)² + α Σ_feet M_c v_i² + β Σ_feet M_c a_i²]`
/// with `v_i = |p_{i+1} − p_i|` and `a_i = |(p_{i+2} − p_{i+1}) − (p_{i+1} − p_i)|`.
pub fn foot_loss_from_joints(joints: &JointSequence, contacts: &[[bool; 2]], w: &GuidanceWeights) -> Result<f64> {
    if joints.joints() != NUM_JOINTS || contacts.len() != joints.frames() {
        return Err(CoreError::Shape("foot loss needs full skeletons and one contact pair per frame".into()));
    }
    let l = joints.frames();
    let mut total = 0.0;
    for i in 0..l {
        let y = joints.get(i, LEFT_FOOT)[1].min(joints.get(i, RIGHT_FOOT)[1]);
        total += (y - w.h_g).powi(2);
        for (k, &foot) in [LEFT_FOOT, RIGHT_FOOT].iter().enumerate() {
            if !contacts[i][k] {
                continue;
            }
            if i + 1 < l {
                let (a, b) = (joints.get(i, foot), joints.get(i + 1, foot));
                total += w.alpha * ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2));
            }
            if i + 2 < l {
                let (a, b, c) = (joints.get(i, foot), joints.get(i + 1, foot), joints.get(i + 2, foot));
                let acc: f64 = (0..3).map(|d| (c[d] - 2.0 * b[d] + a[d]).powi(2)).sum();
                total += w.beta * acc;
            }
        }
    }
    Ok(total / l as f64)
}

/// Foot-stability loss of a motion, with the contact mask taken from its own
/// contact channels.
pub fn foot_guidance_loss(motion: &MotionSequence, w: &GuidanceWeights) -> Result<f64> {
    foot_loss_from_joints(&recover_joints(motion), &foot_contact_flags(motion), w)
}

fn frame_diff(g: &mut Graph, p: Var, len: usize, offset: usize) -> Var {
    let hi: Vec<usize> = (offset..len).collect();
    let lo: Vec<usize> = (0..len - offset).collect();
    let a = g.select_rows(p, &hi);
    let b = g.select_rows(p, &lo);
    g.sub(a, b)
}

/// Tape version of [`foot_loss_from_joints`].
pub fn foot_guidance_loss_graph(g: &mut Graph, joints: JointVars, contacts: &[[bool; 2]], w: &GuidanceWeights) -> Var {
    let l = contacts.len();
    let yl = g.select_cols(joints.y, &[LEFT_FOOT]);
    let yr = g.select_cols(joints.y, &[RIGHT_FOOT]);
    let ymin = g.minimum(yl, yr);
    let dev = g.add_scalar(ymin, -w.h_g);
    let dev2 = g.square(dev);
    let mut terms = vec![g.sum(dev2)];
    for (k, &foot) in [LEFT_FOOT, RIGHT_FOOT].iter().enumerate() {
        let coords: Vec<Var> = [joints.x, joints.y, joints.z].iter().map(|&c| g.select_cols(c, &[foot])).collect();
        if l >= 2 && w.alpha != 0.0 {
            let mut acc = None;
            for &c in &coords {
                let d = frame_diff(g, c, l, 1);
                let d2 = g.square(d);
                acc = Some(match acc {
                    None => d2,
                    Some(a) => g.add(a, d2),
                });
            }
            let m = g.constant(Matrix::column_vector((0..l - 1).map(|i| f64::from(u8::from(contacts[i][k]))).collect()));
            let v = g.mul(acc.expect("three axes"), m);
            let s = g.sum(v);
            terms.push(g.scale(s, w.alpha));
        }
        if l >= 3 && w.beta != 0.0 {
            let mut acc = None;
            for &c in &coords {
                let d = frame_diff(g, c, l, 1);
                let dd = frame_diff(g, d, l - 1, 1);
                let d2 = g.square(dd);
                acc = Some(match acc {
                    None => d2,
                    Some(a) => g.add(a, d2),
                });
            }
            let m = g.constant(Matrix::column_vector((0..l - 2).map(|i| f64::from(u8::from(contacts[i][k]))).collect()));
            let a = g.mul(acc.expect("three axes"), m);
            let s = g.sum(a);
            terms.push(g.scale(s, w.beta));
        }
    }
    let all = g.concat_cols(&terms);
    let total = g.sum(all);
    g.scale(total, 1.0 / l as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::recover_joints_graph;
    use crate::skeleton::REST_POSE;

    fn standing(frames: usize, foot_shift: impl Fn(usize) -> [f64; 3]) -> JointSequence {
        let mut pos = Vec::new();
        for f in 0..frames {
            for (j, p) in REST_POSE.iter().enumerate() {
                let s = if j == LEFT_FOOT { foot_shift(f) } else { [0.0; 3] };
                pos.push([p[0] + s[0], p[1] + s[1], p[2] + s[2]]);
            }
        }
        JointSequence::new(frames, NUM_JOINTS, pos).unwrap()
    }

    #[test]
    fn planted_feet_at_ground_cost_nothing() {
        let j = standing(5, |_| [0.0; 3]);
        let w = GuidanceWeights::default();
        assert_eq!(foot_loss_from_joints(&j, &[[true, true]; 5], &w).unwrap(), 0.0);
    }

    #[test]
    fn raised_feet_cost_height_squared() {
        let mut pos = Vec::new();
        for _ in 0..4 {
            for (j, p) in REST_POSE.iter().enumerate() {
                let lift = if j == LEFT_FOOT || j == RIGHT_FOOT { 0.1 } else { 0.0 };
                pos.push([p[0], p[1] + lift, p[2]]);
            }
        }
        let j = JointSequence::new(4, NUM_JOINTS, pos).unwrap();
        let v = foot_loss_from_joints(&j, &[[false, false]; 4], &GuidanceWeights::default()).unwrap();
        assert!((v - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_mask_zero_joint_loss() {
        let t = JointSequence::new(2, 2, vec![[0.0; 3]; 4]).unwrap();
        let p = JointSequence::new(2, 2, vec![[1.0; 3]; 4]).unwrap();
        let mask = ContactMask { frames: 2, joints: 2, values: vec![false; 4], tau: 0.1 };
        assert_eq!(joint_guidance_loss(&p, &t, &mask).unwrap(), 0.0);
    }

    #[test]
    fn graph_matches_plain_on_recovered_motion() {
        use crate::motion::encode_motion;
        let j = standing(6, |f| [0.02 * f as f64, 0.01 * (f % 2) as f64, 0.0]);
        let m = encode_motion(&j, 30.0).unwrap();
        let w = GuidanceWeights { alpha: 0.7, beta: 1.3, ..Default::default() };
        let contacts = vec![[true, false], [true, true], [false, true], [true, true], [true, false], [false, false]];
        let joints = recover_joints(&m);
        let plain = foot_loss_from_joints(&joints, &contacts, &w).unwrap();
        let mut g = Graph::new();
        let x = g.constant(m.features.clone());
        let jv = recover_joints_graph(&mut g, x, 30.0);
        let v = foot_guidance_loss_graph(&mut g, jv, &contacts, &w);
        assert!((g.value(v).data()[0] - plain).abs() < 1e-12);

        let target = JointSequence::new(6, 2, (0..12).map(|i| [0.1 * i as f64, 0.9, 0.2]).collect()).unwrap();
        let mask = ContactMask { frames: 6, joints: 2, values: (0..12).map(|i| i % 3 != 0).collect(), tau: 0.1 };
        let plain = joint_guidance_loss(&joints, &target, &mask).unwrap();
        let v = joint_guidance_loss_graph(&mut g, jv, &target, &mask);
        assert!((g.value(v).data()[0] - plain).abs() < 1e-12);
    }
}
