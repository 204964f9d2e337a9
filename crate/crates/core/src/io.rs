//! Tensor files: a JSON header `<stem>.json` next to a raw little-endian
//! `f32` payload `<stem>.bin`.
//!
//! ```json
//! {"dtype": "f32", "shape": [100, 256, 3], "byte_order": "little", "config_hash": "..."}
//! ```
//!
//! Extra header keys carry metadata such as `sigma` for affordance maps and
//! `fps` for motions.

use std::fs;
use std::path::{Path, PathBuf};

use hoimotion_nn::Matrix;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::affordance::AffordanceMap;
use crate::error::{CoreError, Result};
use crate::geometry::PointCloudSequence;
use crate::motion::{MotionSequence, FEATURE_DIM};
use crate::skeleton::JointSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_order: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TensorHeader {
    pub fn new(shape: Vec<usize>) -> Self {
        Self { dtype: "f32".into(), shape, byte_order: "little".into(), extra: Map::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.extra.insert(key.to_owned(), value.into());
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.extra.get("config_hash").and_then(Value::as_str)
    }

    fn f64_field(&self, key: &str) -> Result<f64> {
        self.extra
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| CoreError::Format(format!("tensor header lacks numeric `{key}`")))
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn write_tensor(stem: &Path, header: &TensorHeader, data: &[f64]) -> Result<()> {
    if header.numel() != data.len() {
        return Err(CoreError::Shape(format!(
            "header shape {:?} holds {} values, got {}",
            header.shape,
            header.numel(),
            data.len()
        )));
    }
    if let Some(parent) = stem.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(4 * data.len());
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(with_ext(stem, "json"), serde_json::to_vec_pretty(header)?)?;
    fs::write(with_ext(stem, "bin"), bytes)?;
    Ok(())
}

/// Reads a tensor; warns when `expected_hash` differs from the header's.
pub fn read_tensor(stem: &Path, expected_hash: Option<&str>) -> Result<(TensorHeader, Vec<f64>)> {
    let header: TensorHeader = serde_json::from_slice(&fs::read(with_ext(stem, "json"))?)?;
    if header.dtype != "f32" || header.byte_order != "little" {
        return Err(CoreError::Format(format!(
            "unsupported tensor encoding {}/{}",
            header.dtype, header.byte_order
        )));
    }
    let bytes = fs::read(with_ext(stem, "bin"))?;
    if bytes.len() != 4 * header.numel() {
        return Err(CoreError::Format(format!(
            "{} holds {} bytes, header implies {}",
            with_ext(stem, "bin").display(),
            bytes.len(),
            4 * header.numel()
        )));
    }
    if let Some(expected) = expected_hash {
        match header.config_hash() {
            Some(found) if found == expected => {}
            found => log::warn!(
                "{} was produced by config {:?}, current config is {expected}",
                stem.display(),
                found
            ),
        }
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok((header, data))
}

fn check_rank(header: &TensorHeader, rank: usize, what: &str) -> Result<()> {
    if header.shape.len() != rank {
        return Err(CoreError::Format(format!("{what} tensor must have rank {rank}, got {:?}", header.shape)));
    }
    Ok(())
}

pub fn save_point_cloud(stem: &Path, cloud: &PointCloudSequence, config_hash: &str) -> Result<()> {
    let header = TensorHeader::new(vec![cloud.frames(), cloud.points_per_frame(), 3]).with("config_hash", config_hash);
    let data: Vec<f64> = cloud.coords().iter().flatten().copied().collect();
    write_tensor(stem, &header, &data)
}

pub fn load_point_cloud(stem: &Path, expected_hash: Option<&str>) -> Result<PointCloudSequence> {
    let (h, data) = read_tensor(stem, expected_hash)?;
    check_rank(&h, 3, "point cloud")?;
    if h.shape[2] != 3 {
        return Err(CoreError::Format("point cloud last dimension must be 3".into()));
    }
    let coords = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    PointCloudSequence::new(h.shape[0], h.shape[1], coords)
}

pub fn save_motion(stem: &Path, motion: &MotionSequence, config_hash: &str) -> Result<()> {
    let header = TensorHeader::new(vec![motion.frames(), FEATURE_DIM])
        .with("fps", motion.fps)
        .with("config_hash", config_hash);
    write_tensor(stem, &header, motion.features.data())
}

pub fn load_motion(stem: &Path, expected_hash: Option<&str>) -> Result<MotionSequence> {
    let (h, data) = read_tensor(stem, expected_hash)?;
    check_rank(&h, 2, "motion")?;
    let fps = h.f64_field("fps")?;
    MotionSequence::new(Matrix::from_vec(h.shape[0], h.shape[1], data), fps)
}

pub fn save_affordance(stem: &Path, map: &AffordanceMap, config_hash: &str) -> Result<()> {
    let header = TensorHeader::new(vec![map.frames, map.points, map.joints])
        .with("sigma", map.sigma)
        .with("config_hash", config_hash);
    write_tensor(stem, &header, &map.values)
}

pub fn load_affordance(stem: &Path, expected_hash: Option<&str>) -> Result<AffordanceMap> {
    let (h, values) = read_tensor(stem, expected_hash)?;
    check_rank(&h, 3, "affordance")?;
    let sigma = h.f64_field("sigma")?;
    Ok(AffordanceMap { frames: h.shape[0], points: h.shape[1], joints: h.shape[2], values, sigma })
}

pub fn save_joints(stem: &Path, joints: &JointSequence, config_hash: &str) -> Result<()> {
    let header = TensorHeader::new(vec![joints.frames(), joints.joints(), 3]).with("config_hash", config_hash);
    write_tensor(stem, &header, &joints.to_flat())
}

pub fn load_joints(stem: &Path, expected_hash: Option<&str>) -> Result<JointSequence> {
    let (h, data) = read_tensor(stem, expected_hash)?;
    check_rank(&h, 3, "joint")?;
    JointSequence::from_flat(h.shape[0], h.shape[1], &data)
}

/// Generic 2-D matrix tensor (e.g. reduced affordance `L x N`).
pub fn save_matrix(stem: &Path, m: &Matrix, header_extra: &[(&str, Value)]) -> Result<()> {
    let mut header = TensorHeader::new(vec![m.rows(), m.cols()]);
    for (k, v) in header_extra {
        header = header.with(k, v.clone());
    }
    write_tensor(stem, &header, m.data())
}

pub fn load_matrix(stem: &Path, expected_hash: Option<&str>) -> Result<Matrix> {
    let (h, data) = read_tensor(stem, expected_hash)?;
    check_rank(&h, 2, "matrix")?;
    Ok(Matrix::from_vec(h.shape[0], h.shape[1], data))
}
