//! Configuration file loading.
//!
//! The file is TOML whose top-level keys are the [`PipelineConfig`] field
//! names plus the resource keys of [`RunConfig`]. Every key can be
//! overridden from the environment as `CM_<KEY>` (upper case), e.g.
//! `CM_N_REQ=10` or `CM_CALIBRATION=/data/cal.json`. Relative paths in the
//! file are resolved against the file's directory; relative paths from the
//! environment are used as given.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use confmotion::pipeline::PipelineConfig;
use confmotion::predict::PredictorKind;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "CM_";

const PATH_KEYS: [&str; 3] = ["cameras", "calibration", "model"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseScorerKind {
    /// Score attached to each observation by its producer.
    Precomputed,
    /// Mahalanobis distance of the observation's image features.
    FeatureMahalanobis,
    /// Never flags a detected human.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionScorerKind {
    /// Mahalanobis distance of speed and acceleration statistics.
    Mahalanobis,
    /// Never flags.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub predictor: PredictorKind,
    /// Fitted ridge-DCT model document.
    pub model: Option<PathBuf>,
    /// Covariance growth rate of the baseline predictors (m/s).
    pub sigma_v: f64,
    /// Camera pair document; the built-in rig when absent.
    pub cameras: Option<PathBuf>,
    /// Calibration bundle written by `calibrate`.
    pub calibration: Option<PathBuf>,
    pub pose_scorer: PoseScorerKind,
    pub motion_scorer: MotionScorerKind,
    /// Joint standard deviation (m) for datasets without covariances.
    pub default_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            predictor: PredictorKind::LastFrame,
            model: None,
            sigma_v: confmotion::predict::DEFAULT_SIGMA_V,
            cameras: None,
            calibration: None,
            pose_scorer: PoseScorerKind::Precomputed,
            motion_scorer: MotionScorerKind::Constant,
            default_sigma: 0.01,
        }
    }
}

/// Every key the file and the environment may set.
pub fn known_keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then `CM_*` variables from `env`.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let keys = known_keys();
        let mut table = match path {
            Some(p) => read_table(p, &keys)?,
            None => toml::Table::new(),
        };
        for (name, raw) in env {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            if !keys.contains(&key) {
                bail!("unknown configuration variable {name}");
            }
            table.insert(key, parse_env_value(&raw));
        }
        let json = serde_json::to_value(&table).context("converting configuration")?;
        let cfg: RunConfig = serde_json::from_value(json).context("invalid configuration")?;
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    /// [`RunConfig::load`] with the process environment.
    pub fn from_env(path: Option<&Path>) -> Result<Self> {
        Self::load(path, std::env::vars())
    }
}

fn read_table(path: &Path, keys: &[String]) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut table: toml::Table =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(bad) = table.keys().find(|k| !keys.contains(k)) {
        bail!("{}: unknown key `{bad}`", path.display());
    }
    let base = path.parent().unwrap_or(Path::new("."));
    for key in PATH_KEYS {
        if let Some(toml::Value::String(s)) = table.get_mut(key) {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    }
    Ok(table)
}

/// TOML scalar when the text parses as one, otherwise a plain string.
fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
