//! Pipeline configuration: TOML file, environment overrides, content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::guidance::GuidanceWeights;

/// Prefix of environment overrides; `__` separates nested keys, as in
/// `HOIMOTION_CFG_STAGE1__TRAIN_STEPS=500`.
pub const ENV_PREFIX: &str = "HOIMOTION_CFG_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_clips: usize,
    pub clip_len: usize,
    pub fps: f64,
    pub n_points: usize,
    /// Share of clips held out for sampling and evaluation.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 7, n_clips: 64, clip_len: 100, fps: 30.0, n_points: 64, test_fraction: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub bps_points: usize,
    pub bps_radius: f64,
    pub bps_seed: u64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { bps_points: 32, bps_radius: 2.5, bps_seed: 11 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffordanceConfig {
    pub sigma: f64,
    pub tau: f64,
}

impl Default for AffordanceConfig {
    fn default() -> Self {
        Self { sigma: crate::affordance::DEFAULT_SIGMA, tau: crate::affordance::DEFAULT_TAU }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorBackend {
    Template,
    Echo,
    Replay,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationConfig {
    pub backend: AnnotatorBackend,
    /// JSONL fixture for the replay backend.
    pub replay_path: Option<PathBuf>,
    pub text_seed: u64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self { backend: AnnotatorBackend::Template, replay_path: None, text_seed: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub bps_hidden: usize,
    pub pc_dim: usize,
    /// Diffusion steps.
    pub diffusion_steps: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Steps spent on the base denoiser before it is frozen; ignored by stage 1.
    pub base_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent: 64,
            heads: 4,
            layers: 2,
            ff_dim: 128,
            bps_hidden: 128,
            pc_dim: 64,
            diffusion_steps: 50,
            train_steps: 2000,
            batch: 8,
            lr: 1e-3,
            seed: 17,
            base_steps: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub joint: bool,
    pub foot: bool,
    pub alpha: f64,
    pub beta: f64,
    pub h_g: f64,
    pub lbfgs_iters: usize,
    /// Contact threshold for the hand guidance mask.
    pub tau: f64,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        let w = GuidanceWeights::default();
        Self {
            joint: true,
            foot: true,
            alpha: w.alpha,
            beta: w.beta,
            h_g: w.h_g,
            lbfgs_iters: w.lbfgs_iters,
            tau: crate::affordance::DEFAULT_TAU,
            seed: 101,
        }
    }
}

impl GuidanceConfig {
    pub fn weights(&self) -> GuidanceWeights {
        GuidanceWeights {
            alpha: self.alpha,
            beta: self.beta,
            h_g: self.h_g,
            lbfgs_iters: self.lbfgs_iters,
            joint_weight: if self.joint { 1.0 } else { 0.0 },
            foot_weight: if self.foot { 1.0 } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub evaluator_steps: usize,
    pub diversity_pairs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { evaluator_steps: 300, diversity_pairs: 300, seed: 29 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub geometry: GeometryConfig,
    pub affordance: AffordanceConfig,
    pub annotation: AnnotationConfig,
    pub stage1: ModelConfig,
    pub stage2: ModelConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            geometry: GeometryConfig::default(),
            affordance: AffordanceConfig::default(),
            annotation: AnnotationConfig::default(),
            stage1: ModelConfig::default(),
            stage2: ModelConfig { seed: 23, ..Default::default() },
            guidance: GuidanceConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(CoreError::Config(format!("{name} must be at least 1")))
    } else {
        Ok(())
    }
}

fn check_model(prefix: &str, m: &ModelConfig) -> Result<()> {
    for (k, v) in [
        ("latent", m.latent),
        ("heads", m.heads),
        ("layers", m.layers),
        ("ff_dim", m.ff_dim),
        ("bps_hidden", m.bps_hidden),
        ("pc_dim", m.pc_dim),
        ("diffusion_steps", m.diffusion_steps),
        ("batch", m.batch),
    ] {
        nonzero(&format!("{prefix}.{k}"), v)?;
    }
    if m.latent % m.heads != 0 {
        return Err(CoreError::Config(format!("{prefix}.latent must be divisible by {prefix}.heads")));
    }
    positive(&format!("{prefix}.lr"), m.lr)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        nonzero("data.n_clips", d.n_clips)?;
        if d.clip_len < 40 {
            return Err(CoreError::Config(format!("data.clip_len must be at least 40, got {}", d.clip_len)));
        }
        positive("data.fps", d.fps)?;
        if d.n_points < 4 {
            return Err(CoreError::Config("data.n_points must be at least 4".into()));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(CoreError::Config("data.test_fraction must lie in [0, 1)".into()));
        }
        nonzero("geometry.bps_points", self.geometry.bps_points)?;
        positive("geometry.bps_radius", self.geometry.bps_radius)?;
        positive("affordance.sigma", self.affordance.sigma)?;
        positive("affordance.tau", self.affordance.tau)?;
        if self.annotation.backend == AnnotatorBackend::Replay && self.annotation.replay_path.is_none() {
            return Err(CoreError::Config("annotation.replay_path is required for the replay backend".into()));
        }
        check_model("stage1", &self.stage1)?;
        check_model("stage2", &self.stage2)?;
        positive("guidance.tau", self.guidance.tau)?;
        self.guidance.weights().validate().map_err(|e| CoreError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file, applies environment overrides then `extra`, validates.
    pub fn load(path: Option<&Path>, extra: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let value: toml::Table = toml::from_str(&text).map_err(|e| CoreError::Config(e.to_string()))?;
        let value = apply_overrides(value, &env_overrides(std::env::vars())?)?;
        let value = apply_overrides(value, extra)?;
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form, output location excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out_dir
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

/// Dotted-key overrides (`stage1.train_steps`) from environment variables.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.split("__").map(str::to_lowercase).collect::<Vec<_>>().join("."), v)))
        .collect();
    out.sort();
    if let Some((k, _)) = out.iter().find(|(k, _)| k.split('.').any(str::is_empty)) {
        return Err(CoreError::Config(format!("malformed override {k:?}")));
    }
    Ok(out)
}

/// Sets each dotted key to a TOML literal, or to a string when it does not parse.
pub fn apply_overrides(mut table: toml::Table, overrides: &[(String, String)]) -> Result<toml::Table> {
    for (key, raw) in overrides {
        let path: Vec<&str> = key.split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(CoreError::Config(format!("malformed override {key:?}")));
        }
        let mut node = &mut table;
        for part in &path[..path.len() - 1] {
            let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| CoreError::Config(format!("override {key} descends into a non-table key")))?;
        }
        node.insert(path[path.len() - 1].to_string(), parse_scalar(raw));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(PipelineConfig::from_toml_str("[data]\nseeds = 3\n"), Err(CoreError::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("[nope]\n"), Err(CoreError::Config(_))));
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let vars = vec![
            ("HOIMOTION_CFG_STAGE1__TRAIN_STEPS".to_string(), "12".to_string()),
            ("HOIMOTION_CFG_GUIDANCE__JOINT".to_string(), "false".to_string()),
            ("HOIMOTION_CFG_PATHS__OUT_DIR".to_string(), "/tmp/x".to_string()),
            ("UNRELATED".to_string(), "1".to_string()),
        ];
        let t = apply_overrides(toml::Table::new(), &env_overrides(vars).unwrap()).unwrap();
        let c: PipelineConfig = t.try_into().unwrap();
        assert_eq!(c.stage1.train_steps, 12);
        assert!(!c.guidance.joint);
        assert_eq!(c.paths.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.guidance.alpha = 2.0;
        assert_ne!(a.hash(), b.hash());
    }
}
