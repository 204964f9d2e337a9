//! Procedural interaction clips: a stick figure that reaches for a box,
//! manipulates it, and lets go, with the box as a rigid point cloud.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{Point, PointCloudSequence};
use crate::skeleton::{
    JointSequence, LEFT_ANKLE, LEFT_FOOT, LEFT_WRIST, NUM_JOINTS, PELVIS, REST_POSE, RIGHT_ANKLE, RIGHT_FOOT,
    RIGHT_WRIST,
};

/// Swing apex above the resting foot height.
const STEP_HEIGHT: f64 = 0.08;
const THIGH: f64 = 0.41;
const PATTERN_SEED: u64 = 0x0b0c_5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Carry,
    Push,
    LiftRotatePlace,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Carry, Scenario::Push, Scenario::LiftRotatePlace];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Carry => "carry",
            Scenario::Push => "push",
            Scenario::LiftRotatePlace => "lift-rotate-place",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown scenario {s:?}")))
    }
}

/// Object category name and box extents `(x, y, z)` in meters.
pub const CATEGORIES: [(&str, [f64; 3]); 8] = [
    ("plasticbox", [0.45, 0.30, 0.35]),
    ("largebox", [0.60, 0.45, 0.50]),
    ("smallbox", [0.30, 0.22, 0.25]),
    ("suitcase", [0.50, 0.62, 0.22]),
    ("monitor", [0.55, 0.40, 0.18]),
    ("smalltable", [0.60, 0.50, 0.42]),
    ("whitechair", [0.45, 0.80, 0.52]),
    ("trashcan", [0.34, 0.55, 0.28]),
];

/// Pattern indices the hands attach to.
pub const GRASP_LEFT: usize = 0;
pub const GRASP_RIGHT: usize = 1;
pub const PUSH_LEFT: usize = 2;
pub const PUSH_RIGHT: usize = 3;

/// Points on the unit cube surface shared by every box, so point `i` is the
/// same spot on the object in every clip. The first four are the grasp and
/// push anchors.
pub fn canonical_pattern(n: usize) -> Result<Vec<Point>> {
    if n < 4 {
        return Err(CoreError::InvalidArgument(format!("box pattern needs at least 4 points, got {n}")));
    }
    let mut pts = vec![[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0], [0.25, 0.0, -0.5], [-0.25, 0.0, -0.5]];
    let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED);
    while pts.len() < n {
        let face = rng.random_range(0..6usize);
        let (u, v): (f64, f64) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let s = if face % 2 == 0 { 0.5 } else { -0.5 };
        pts.push(match face / 2 {
            0 => [s, u, v],
            1 => [u, s, v],
            _ => [u, v, s],
        });
    }
    Ok(pts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub frames: usize,
    pub fps: f64,
    pub n_points: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { frames: 100, fps: 30.0, n_points: 64 }
    }
}

/// One generated clip in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub id: String,
    pub category: String,
    pub scenario: Scenario,
    pub joints: JointSequence,
    pub cloud: PointCloudSequence,
    /// Frames where both hands hold the object.
    pub contact: std::ops::Range<usize>,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn lerp(a: Point, b: Point, s: f64) -> Point {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
}

/// Piecewise-smooth scalar track from `(frame, value)` keys.
struct Track(Vec<(usize, f64)>);

impl Track {
    fn at(&self, f: usize) -> f64 {
        let k = &self.0;
        if f <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((f0, v0), (f1, v1)) = (w[0], w[1]);
            if f <= f1 {
                let s = if f1 == f0 { 1.0 } else { (f - f0) as f64 / (f1 - f0) as f64 };
                return v0 + (v1 - v0) * smoothstep(s);
            }
        }
        k[k.len() - 1].1
    }
}

/// Linear track, used for the walking pelvis so steps stay even.
fn linear(f: usize, f0: usize, f1: usize, v0: f64, v1: f64) -> f64 {
    if f <= f0 {
        v0
    } else if f >= f1 {
        v1
    } else {
        v0 + (v1 - v0) * (f - f0) as f64 / (f1 - f0) as f64
    }
}

struct Plan {
    reach: usize,
    grasp: usize,
    release: usize,
    back: usize,
    walk: (usize, usize),
    walk_dist: f64,
    box_lift: Track,
    box_yaw: Track,
    crouch: Track,
    anchors: (usize, usize),
    box_z0: f64,
}

fn scaled(len: f64, frames: usize) -> usize {
    ((len * frames as f64 / 100.0).round() as usize).max(2)
}

fn plan<R: Rng>(scenario: Scenario, size: [f64; 3], frames: usize, rng: &mut R) -> Plan {
    let s = |n: f64| scaled(n, frames);
    let reach = s(rng.random_range(2.0..6.0));
    let grasp = reach + s(10.0);
    let grasp_y = size[1] / 2.0;
    let crouch_for = |y: f64| (0.55 - y).clamp(0.0, 0.4);
    let c0 = crouch_for(grasp_y);
    match scenario {
        Scenario::Carry => {
            let lift_h = rng.random_range(0.25..0.45);
            let steps = rng.random_range(3..=4usize);
            let step_len = rng.random_range(0.25..0.35);
            let up = grasp + s(12.0);
            let walk = (up, up + s(10.0 * steps as f64));
            let down = walk.1 + s(12.0);
            let release = down;
            Plan {
                reach,
                grasp,
                release,
                back: release + s(10.0),
                walk,
                walk_dist: steps as f64 * step_len,
                box_lift: Track(vec![(grasp, 0.0), (up, lift_h), (walk.1, lift_h), (down, 0.0)]),
                box_yaw: Track(vec![(0, 0.0)]),
                crouch: Track(vec![(0, 0.0), (grasp, c0), (up, crouch_for(grasp_y + lift_h)), (walk.1, crouch_for(grasp_y + lift_h)), (down, c0), (down + s(10.0), 0.0)]),
                anchors: (GRASP_LEFT, GRASP_RIGHT),
                box_z0: 0.35 + size[2] / 2.0,
            }
        }
        Scenario::Push => {
            let steps = rng.random_range(4..=6usize);
            let step_len = rng.random_range(0.2..0.3);
            let walk = (grasp + s(2.0), grasp + s(2.0) + s(10.0 * steps as f64));
            let release = walk.1 + s(2.0);
            Plan {
                reach,
                grasp,
                release,
                back: release + s(10.0),
                walk,
                walk_dist: steps as f64 * step_len,
                box_lift: Track(vec![(0, 0.0)]),
                box_yaw: Track(vec![(0, 0.0)]),
                crouch: Track(vec![(0, 0.0), (grasp, c0), (release, c0), (release + s(10.0), 0.0)]),
                anchors: (PUSH_LEFT, PUSH_RIGHT),
                box_z0: 0.45 + size[2] / 2.0,
            }
        }
        Scenario::LiftRotatePlace => {
            let lift_h = rng.random_range(0.25..0.45);
            let turn = rng.random_range(50f64..100.0).to_radians() * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let up = grasp + s(12.0);
            let turned = up + s(24.0);
            let down = turned + s(12.0);
            let c_up = crouch_for(grasp_y + lift_h);
            Plan {
                reach,
                grasp,
                release: down,
                back: down + s(10.0),
                walk: (0, 0),
                walk_dist: 0.0,
                box_lift: Track(vec![(grasp, 0.0), (up, lift_h), (turned, lift_h), (down, 0.0)]),
                box_yaw: Track(vec![(up, 0.0), (turned, turn)]),
                crouch: Track(vec![(0, 0.0), (grasp, c0), (up, c_up), (turned, c_up), (down, c0), (down + s(10.0), 0.0)]),
                anchors: (GRASP_LEFT, GRASP_RIGHT),
                box_z0: 0.35 + size[2] / 2.0,
            }
        }
    }
}

/// Foot placement per frame: horizontal position along z and swing lift.
fn footsteps(plan: &Plan, frames: usize, pelvis_z: &[f64]) -> [Vec<(f64, f64)>; 2] {
    let mut feet = [vec![(0.0, 0.0); frames], vec![(0.0, 0.0); frames]];
    let (w0, w1) = plan.walk;
    let steps = if w1 > w0 { ((w1 - w0) as f64 / scaled(10.0, frames) as f64).round().max(1.0) as usize } else { 0 };
    let mut plant = [0.0f64, 0.0];
    let mut segments = Vec::new();
    for k in 0..steps {
        let a = w0 + (w1 - w0) * k / steps;
        let b = w0 + (w1 - w0) * (k + 1) / steps;
        segments.push((k % 2, a, b));
    }
    for f in 0..frames {
        for (side, foot) in feet.iter_mut().enumerate() {
            foot[f] = (plant[side], 0.0);
        }
        if let Some(&(side, a, b)) = segments.iter().find(|&&(_, a, b)| f > a && f <= b) {
            let target = pelvis_z[b.min(frames - 1)];
            let u = (f - a) as f64 / (b - a) as f64;
            let z = plant[side] + (target - plant[side]) * u;
            feet[side][f] = (z, STEP_HEIGHT * (std::f64::consts::PI * u).sin());
            if f == b {
                plant[side] = target;
                feet[side][f] = (target, 0.0);
            }
        }
    }
    feet
}

fn rotate_y(p: Point, yaw: f64) -> Point {
    let (s, c) = yaw.sin_cos();
    [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]]
}

/// Builds one clip from its own seed.
pub fn generate_clip(id: &str, seed: u64, scenario: Scenario, cfg: &SyntheticConfig) -> Result<SyntheticClip> {
    let frames = cfg.frames;
    if frames < 40 {
        return Err(CoreError::InvalidArgument(format!("synthetic clips need at least 40 frames, got {frames}")));
    }
    let pattern = canonical_pattern(cfg.n_points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (category, size) = CATEGORIES[rng.random_range(0..CATEGORIES.len())];
    let box_x = rng.random_range(-0.05..0.05);
    let yaw0 = rng.random_range(-10f64..10.0).to_radians();
    let p = plan(scenario, size, frames, &mut rng);
    if p.back >= frames {
        return Err(CoreError::InvalidArgument(format!("{frames} frames too short for the {} timeline", scenario.name())));
    }

    let pelvis_z: Vec<f64> = (0..frames).map(|f| linear(f, p.walk.0, p.walk.1, 0.0, p.walk_dist)).collect();
    let carried = |f: usize| match scenario {
        Scenario::LiftRotatePlace => 0.0,
        _ => pelvis_z[f],
    };

    let mut coords = Vec::with_capacity(frames * cfg.n_points);
    for f in 0..frames {
        let center = [box_x, size[1] / 2.0 + p.box_lift.at(f), p.box_z0 + carried(f)];
        let yaw = yaw0 + p.box_yaw.at(f);
        for q in &pattern {
            let local = rotate_y([q[0] * size[0], q[1] * size[1], q[2] * size[2]], yaw);
            coords.push([center[0] + local[0], center[1] + local[1], center[2] + local[2]]);
        }
    }
    let cloud = PointCloudSequence::new(frames, cfg.n_points, coords)?;

    let feet = footsteps(&p, frames, &pelvis_z);
    let mut positions = Vec::with_capacity(frames * NUM_JOINTS);
    for f in 0..frames {
        let crouch = p.crouch.at(f);
        let lean = 0.5 * crouch;
        let pz = pelvis_z[f];
        let mut j: Vec<Point> = REST_POSE.iter().map(|r| [r[0], r[1] - crouch, r[2] + pz]).collect();
        for &k in &[3usize, 6, 9, 12, 13, 14, 15, 16, 17] {
            j[k][2] += lean * (REST_POSE[k][1] - REST_POSE[PELVIS][1]) / 0.7;
        }
        for (side, (ankle, toe)) in [(LEFT_ANKLE, LEFT_FOOT), (RIGHT_ANKLE, RIGHT_FOOT)].into_iter().enumerate() {
            let (z, lift) = feet[side][f];
            j[ankle] = [REST_POSE[ankle][0], REST_POSE[ankle][1] + lift, REST_POSE[ankle][2] + z];
            j[toe] = [REST_POSE[toe][0], REST_POSE[toe][1] + lift, REST_POSE[toe][2] + z];
        }
        for (hip, knee, ankle) in [(1usize, 4usize, LEFT_ANKLE), (2, 5, RIGHT_ANKLE)] {
            let mid = lerp(j[hip], j[ankle], 0.5);
            let half = (0..3).map(|k| (j[hip][k] - j[ankle][k]).powi(2)).sum::<f64>().sqrt() / 2.0;
            let bend = (THIGH * THIGH - half * half).max(0.0).sqrt();
            j[knee] = [mid[0], mid[1], mid[2] + 0.02 + bend];
        }
        for (wrist, anchor) in [(LEFT_WRIST, p.anchors.0), (RIGHT_WRIST, p.anchors.1)] {
            let rest = j[wrist];
            let held = cloud.frame(f)[anchor];
            j[wrist] = if f < p.reach || f >= p.back {
                rest
            } else if f < p.grasp {
                lerp(rest, held, smoothstep((f - p.reach) as f64 / (p.grasp - p.reach) as f64))
            } else if f <= p.release {
                held
            } else {
                let frozen = cloud.frame(p.release)[anchor];
                lerp(frozen, rest, smoothstep((f - p.release) as f64 / (p.back - p.release) as f64))
            };
        }
        for (shoulder, elbow, wrist, side) in [(16usize, 18usize, LEFT_WRIST, 1.0), (17, 19, RIGHT_WRIST, -1.0)] {
            let mid = lerp(j[shoulder], j[wrist], 0.5);
            j[elbow] = [mid[0] + 0.04 * side, mid[1] - 0.04, mid[2]];
        }
        positions.extend(j);
    }
    let joints = JointSequence::new(frames, NUM_JOINTS, positions)?;
    Ok(SyntheticClip {
        id: id.to_string(),
        category: category.to_string(),
        scenario,
        joints,
        cloud,
        contact: p.grasp..p.release + 1,
    })
}

fn clip_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64).rotate_left(17) ^ 0x5851_f42d
}

/// `n_clips` clips of one scenario.
pub fn generate_synthetic(seed: u64, n_clips: usize, scenario: Scenario, cfg: &SyntheticConfig) -> Result<Vec<SyntheticClip>> {
    (0..n_clips)
        .map(|i| generate_clip(&format!("{}-{i:04}", scenario.name()), clip_seed(seed, i), scenario, cfg))
        .collect()
}

/// Clips cycling through the scenarios.
pub fn generate_mixed(seed: u64, n_clips: usize, cfg: &SyntheticConfig) -> Result<Vec<SyntheticClip>> {
    (0..n_clips)
        .map(|i| {
            let sc = Scenario::ALL[i % Scenario::ALL.len()];
            generate_clip(&format!("clip-{i:04}"), clip_seed(seed, i), sc, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist;

    #[test]
    fn hands_sit_on_anchor_points_while_holding() {
        for sc in Scenario::ALL {
            let c = &generate_synthetic(4, 2, sc, &SyntheticConfig::default()).unwrap()[0];
            for f in c.contact.clone() {
                let pts = c.cloud.frame(f);
                let nearest = |p: Point| pts.iter().map(|q| dist(*q, p)).fold(f64::INFINITY, f64::min);
                assert_eq!(nearest(c.joints.get(f, LEFT_WRIST)), 0.0);
                assert_eq!(nearest(c.joints.get(f, RIGHT_WRIST)), 0.0);
            }
        }
    }

    #[test]
    fn starts_canonical() {
        let c = &generate_mixed(1, 3, &SyntheticConfig::default()).unwrap()[2];
        let p = c.joints.get(0, PELVIS);
        assert_eq!((p[0], p[2]), (0.0, 0.0));
    }

    #[test]
    fn pattern_is_shared() {
        assert_eq!(canonical_pattern(20).unwrap(), canonical_pattern(20).unwrap());
        assert_eq!(&canonical_pattern(20).unwrap()[..10], &canonical_pattern(10).unwrap()[..]);
    }

    #[test]
    fn scenario_names_parse() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
    }
}
