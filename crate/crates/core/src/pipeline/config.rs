use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::conformal::{DEFAULT_PADDING, DEFAULT_V_MAX};
use crate::geometry::DEFAULT_SIGMA_ISO;

/// Default fallback standard deviation (m) for joints that cannot be
/// triangulated.
pub const DEFAULT_SIGMA_FALLBACK: f64 = 0.25;

/// Pipeline parameters. Field names double as configuration-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// History length `K_I` (frames).
    pub k_i: usize,
    /// Prediction horizon `K_P` (frames).
    pub k_p: usize,
    /// Consecutive image-derived poses required before accepting a prediction.
    pub n_req: usize,
    /// Camera frame rate (Hz).
    pub f_cam: f64,
    /// Conformal miscoverage level.
    pub epsilon: f64,
    /// OOD false-flag level.
    pub epsilon_ood: f64,
    /// Maximum human speed for set extension (m/s).
    pub v_max: f64,
    /// Isotropic inflation of every propagated joint covariance (m).
    pub sigma_iso: f64,
    /// Standard deviation used for joints whose triangulation fails (m).
    pub sigma_fallback: f64,
    /// Padding added to every published sphere (m).
    pub padding: f64,
    /// Also score camera 2 in the 2D OOD check.
    pub score_both_cameras: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_i: 50,
            k_p: 10,
            n_req: 3,
            f_cam: 25.0,
            epsilon: 0.01,
            epsilon_ood: 0.05,
            v_max: DEFAULT_V_MAX,
            sigma_iso: DEFAULT_SIGMA_ISO,
            sigma_fallback: DEFAULT_SIGMA_FALLBACK,
            padding: DEFAULT_PADDING,
            score_both_cameras: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PipelineError::InvalidConfig(msg));
        if self.k_i == 0 || self.k_p == 0 {
            return bad(format!(
                "K_I = {} and K_P = {} must be positive",
                self.k_i, self.k_p
            ));
        }
        if self.n_req == 0 || self.n_req > self.k_i {
            return bad(format!(
                "N_req = {} must lie in 1..={}",
                self.n_req, self.k_i
            ));
        }
        if !(self.f_cam.is_finite() && self.f_cam > 0.0) {
            return bad(format!("f_cam = {} must be positive", self.f_cam));
        }
        for (name, v) in [("epsilon", self.epsilon), ("epsilon_ood", self.epsilon_ood)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} must lie in (0, 1)"));
            }
        }
        for (name, v) in [
            ("v_max", self.v_max),
            ("sigma_iso", self.sigma_iso),
            ("sigma_fallback", self.sigma_fallback),
            ("padding", self.padding),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.f_cam
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn n_req_bounds() {
        let mut c = PipelineConfig {
            n_req: 0,
            ..PipelineConfig::default()
        };
        assert!(c.validate().is_err());
        c.n_req = 51;
        assert!(c.validate().is_err());
        c.n_req = 50;
        c.validate().unwrap();
        c.f_cam = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_document_uses_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"k_i": 20, "n_req": 5}"#).unwrap();
        assert_eq!(c.k_i, 20);
        assert_eq!(c.k_p, 10);
        assert_eq!(c.n_req, 5);
    }
}
