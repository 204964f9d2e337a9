//! Interaction clips, splitting of long recordings, and on-disk layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationRecord;
use crate::error::{CoreError, Result};
use crate::geometry::PointCloudSequence;
use crate::io::{load_motion, load_point_cloud, save_motion, save_point_cloud};
use crate::motion::{encode_motion, facing_yaw, recover_joints, MotionSequence};
use crate::skeleton::{JointSequence, PELVIS};

use super::synthetic::SyntheticClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionClip {
    pub id: String,
    pub category: String,
    pub motion: MotionSequence,
    pub cloud: PointCloudSequence,
    pub annotation: Option<AnnotationRecord>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClipMeta {
    id: String,
    category: String,
    split: Split,
    frames: usize,
    fps: f64,
}

impl InteractionClip {
    pub fn from_joints(
        id: &str,
        category: &str,
        joints: &JointSequence,
        cloud: PointCloudSequence,
        fps: f64,
        split: Split,
    ) -> Result<Self> {
        if joints.frames() != cloud.frames() {
            return Err(CoreError::Shape(format!(
                "clip {id}: {} motion frames vs {} cloud frames",
                joints.frames(),
                cloud.frames()
            )));
        }
        Ok(Self {
            id: id.to_owned(),
            category: category.to_owned(),
            motion: encode_motion(joints, fps)?,
            cloud,
            annotation: None,
            split,
        })
    }

    pub fn from_synthetic(clip: &SyntheticClip, fps: f64, split: Split) -> Result<Self> {
        Self::from_joints(&clip.id, &clip.category, &clip.joints, clip.cloud.clone(), fps, split)
    }

    pub fn frames(&self) -> usize {
        self.motion.frames()
    }

    /// Global joints recovered from the features.
    pub fn joints(&self) -> JointSequence {
        recover_joints(&self.motion)
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_motion(&dir.join("motion"), &self.motion, config_hash)?;
        save_point_cloud(&dir.join("cloud"), &self.cloud, config_hash)?;
        let meta = ClipMeta {
            id: self.id.clone(),
            category: self.category.clone(),
            split: self.split,
            frames: self.frames(),
            fps: self.motion.fps,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let meta: ClipMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let motion = load_motion(&dir.join("motion"), expected_hash)?;
        let cloud = load_point_cloud(&dir.join("cloud"), expected_hash)?;
        if motion.frames() != meta.frames || cloud.frames() != meta.frames {
            return Err(CoreError::Format(format!("clip {} has inconsistent frame counts", meta.id)));
        }
        Ok(Self { id: meta.id, category: meta.category, motion, cloud, annotation: None, split: meta.split })
    }
}

/// Non-overlapping windows of `clip_len` frames; a short remainder is dropped.
pub fn split_clips(
    joints: &JointSequence,
    cloud: &PointCloudSequence,
    clip_len: usize,
) -> Result<Vec<(JointSequence, PointCloudSequence)>> {
    if clip_len == 0 {
        return Err(CoreError::InvalidArgument("clip length must be positive".into()));
    }
    if joints.frames() != cloud.frames() {
        return Err(CoreError::Shape("recording motion and cloud lengths differ".into()));
    }
    let j = joints.joints();
    let n = cloud.points_per_frame();
    (0..joints.frames() / clip_len)
        .map(|k| {
            let (a, b) = (k * clip_len, (k + 1) * clip_len);
            let jp = joints.positions()[a * j..b * j].to_vec();
            let cp = cloud.coords()[a * n..b * n].to_vec();
            Ok((JointSequence::new(clip_len, j, jp)?, PointCloudSequence::new(clip_len, n, cp)?))
        })
        .collect()
}

/// Moves a window so its first pelvis sits above the origin facing +z.
pub fn canonicalize(joints: &JointSequence, cloud: &PointCloudSequence) -> Result<(JointSequence, PointCloudSequence)> {
    let root = joints.get(0, PELVIS);
    let yaw = facing_yaw(joints.frame(0));
    let (s, c) = yaw.sin_cos();
    // inverse of the facing rotation about y
    let tf = |p: &[f64; 3]| {
        let (x, z) = (p[0] - root[0], p[2] - root[2]);
        [c * x - s * z, p[1], s * x + c * z]
    };
    let jp = joints.positions().iter().map(tf).collect();
    let cp = cloud.coords().iter().map(tf).collect();
    Ok((
        JointSequence::new(joints.frames(), joints.joints(), jp)?,
        PointCloudSequence::new(cloud.frames(), cloud.points_per_frame(), cp)?,
    ))
}

/// Deterministic train/test assignment spreading test clips evenly.
pub fn assign_split(index: usize, test_fraction: f64) -> Split {
    let before = (index as f64 * test_fraction).floor();
    let after = ((index + 1) as f64 * test_fraction).floor();
    if after > before {
        Split::Test
    } else {
        Split::Train
    }
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
