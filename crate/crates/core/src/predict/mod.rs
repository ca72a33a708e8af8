//! Motion predictors behind a common interface, DCT-domain numerics, the
//! Cholesky covariance parameterization, and the training losses exposed as
//! evaluation metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, PoseCovariances};

pub mod cholesky;
pub mod dct;
pub mod loss;
pub mod ridge;

pub use cholesky::{cholesky_to_cov, cov_to_cholesky, CholeskyParams};
pub use dct::{dct_forward, dct_inverse, DctBasis};
pub use loss::{nll_from_cholesky, nll_gradient_cholesky, nll_loss, pose_loss, total_loss};
pub use ridge::{fit_ridge_dct, RidgeDct, RidgeDctModel};

/// Default per-axis velocity uncertainty (m/s) for the baseline covariance growth.
pub const DEFAULT_SIGMA_V: f64 = 0.5;
/// Default ridge regularizer.
pub const DEFAULT_RIDGE_MU: f64 = 1e-3;
/// Allowed deviation of history timestamps from the nominal frame spacing (s).
pub const TIMESTAMP_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("history has {have} poses, predictor needs {needed}")]
    HistoryIncomplete { needed: usize, have: usize },
    #[error("ridge-DCT model has not been fitted")]
    ModelNotFitted,
    #[error("insufficient training data: need {needed} windows, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("covariance determinant is numerically zero")]
    SingularCovariance,
    #[error("prediction slot {slot} is invalid")]
    InvalidSlot { slot: usize },
    #[error("dimension mismatch: {what}")]
    DimensionMismatch { what: String },
    #[error("invalid predictor configuration: {0}")]
    InvalidConfig(String),
    #[error("history timestamps: {0}")]
    Timestamps(String),
    #[error("model document: {0}")]
    Document(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
}

pub type Result<T, E = PredictError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub k_i: usize,
    pub k_p: usize,
    pub joints: usize,
    /// Weight of the ℓ1 pose loss in the total loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Retained low-frequency DCT coefficients of the input window.
    pub dct_cutoff: usize,
    #[serde(default = "default_ridge_mu")]
    pub ridge_mu: f64,
    #[serde(default = "default_sigma_v")]
    pub sigma_v: f64,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_ridge_mu() -> f64 {
    DEFAULT_RIDGE_MU
}

fn default_sigma_v() -> f64 {
    DEFAULT_SIGMA_V
}

impl PredictorConfig {
    pub fn new(k_i: usize, k_p: usize, joints: usize) -> Self {
        Self {
            k_i,
            k_p,
            joints,
            lambda: default_lambda(),
            dct_cutoff: k_i.min(10),
            ridge_mu: DEFAULT_RIDGE_MU,
            sigma_v: DEFAULT_SIGMA_V,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PredictError::InvalidConfig(m.into()));
        if self.k_i == 0 || self.k_p == 0 || self.joints == 0 {
            return bad("k_i, k_p and joints must be at least 1");
        }
        if self.dct_cutoff == 0 || self.dct_cutoff > self.k_i {
            return bad("dct_cutoff must be in 1..=k_i");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.ridge_mu >= 0.0) || !(self.sigma_v >= 0.0) {
            return bad("ridge_mu and sigma_v must be non-negative");
        }
        Ok(())
    }
}

/// The `K_I` most recent poses and covariances fed to a predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionHistory {
    pub poses: Vec<Pose>,
    pub covs: Vec<PoseCovariances>,
    pub frame_rate: f64,
}

impl MotionHistory {
    /// Checks equal lengths, joint counts and uniform frame spacing.
    pub fn new(poses: Vec<Pose>, covs: Vec<PoseCovariances>, frame_rate: f64) -> Result<Self> {
        let history = Self::new_unchecked_spacing(poses, covs, frame_rate)?;
        let dt = 1.0 / frame_rate;
        for (i, w) in history.poses.windows(2).enumerate() {
            let gap = w[1].timestamp - w[0].timestamp;
            if (gap - dt).abs() > TIMESTAMP_TOL {
                return Err(PredictError::Timestamps(format!(
                    "frames {i}..{} are {gap} s apart, expected {dt} s",
                    i + 1
                )));
            }
        }
        Ok(history)
    }

    /// Like [`MotionHistory::new`] but tolerates timestamp jitter.
    pub fn new_unchecked_spacing(
        poses: Vec<Pose>,
        covs: Vec<PoseCovariances>,
        frame_rate: f64,
    ) -> Result<Self> {
        if !(frame_rate > 0.0) || !frame_rate.is_finite() {
            return Err(PredictError::InvalidConfig(
                "frame_rate must be positive".into(),
            ));
        }
        if poses.len() != covs.len() {
            return Err(PredictError::DimensionMismatch {
                what: format!("{} poses vs {} covariance sets", poses.len(), covs.len()),
            });
        }
        if let Some(first) = poses.first() {
            let j = first.len();
            if poses.iter().any(|p| p.len() != j) || covs.iter().any(|c| c.len() != j) {
                return Err(PredictError::DimensionMismatch {
                    what: "joint count varies across the history".into(),
                });
            }
        }
        Ok(Self {
            poses,
            covs,
            frame_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.poses.first().map_or(0, Pose::len)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn last(&self) -> Option<(&Pose, &PoseCovariances)> {
        Some((self.poses.last()?, self.covs.last()?))
    }
}

/// `K_P` future poses with covariances and per-slot validity; this is also
/// the pipeline's motion buffer.
///
/// `age` counts left shifts since the prediction was made, so slot `i`
/// holds horizon step `i + age + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionPrediction {
    pub poses: Vec<Pose>,
    pub covs: Vec<PoseCovariances>,
    pub valid: Vec<bool>,
    pub age: usize,
}

impl MotionPrediction {
    /// All slots valid, age 0.
    pub fn from_parts(poses: Vec<Pose>, covs: Vec<PoseCovariances>) -> Self {
        let valid = vec![true; poses.len()];
        Self {
            poses,
            covs,
            valid,
            age: 0,
        }
    }

    /// Every slot holds the NaN sentinel.
    pub fn invalid(k_p: usize, joints: usize) -> Self {
        Self {
            poses: vec![Pose::sentinel(joints, f64::NAN); k_p],
            covs: vec![PoseCovariances::sentinel(joints); k_p],
            valid: vec![false; k_p],
            age: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.poses.first().map_or(0, Pose::len)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Slot 0, if it holds a prediction.
    pub fn first(&self) -> Option<(&Pose, &PoseCovariances)> {
        match self.valid.first() {
            Some(true) => Some((&self.poses[0], &self.covs[0])),
            _ => None,
        }
    }

    /// Zero-based horizon index of slot `slot`.
    pub fn horizon_index(&self, slot: usize) -> usize {
        slot + self.age
    }

    /// Drops slot 0, moves every slot one step earlier and marks the vacated
    /// last slot invalid.
    pub fn shift_left(&mut self) {
        if self.poses.is_empty() {
            return;
        }
        let joints = self.joints();
        self.poses.remove(0);
        self.covs.remove(0);
        self.valid.remove(0);
        self.poses.push(Pose::sentinel(joints, f64::NAN));
        self.covs.push(PoseCovariances::sentinel(joints));
        self.valid.push(false);
        self.age += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.poses.iter().all(Pose::is_finite) && self.covs.iter().all(PoseCovariances::is_finite)
    }

    /// Valid slots are finite with positive-definite covariances; invalid
    /// slots hold the NaN sentinel.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.covs.len() != self.poses.len() || self.valid.len() != self.poses.len() {
            return Err("slot vectors have different lengths".into());
        }
        for (k, ((p, c), v)) in self
            .poses
            .iter()
            .zip(&self.covs)
            .zip(&self.valid)
            .enumerate()
        {
            if *v {
                if !p.is_finite() || !c.is_finite() {
                    return Err(format!("valid slot {k} is not finite"));
                }
                if c.covs.iter().any(|m| m.cholesky().is_none()) {
                    return Err(format!(
                        "valid slot {k} has a covariance that is not positive definite"
                    ));
                }
            } else if p.joints.iter().any(|j| j.iter().any(|x| !x.is_nan())) {
                return Err(format!("invalid slot {k} does not hold the NaN sentinel"));
            }
        }
        Ok(())
    }
}

/// A motion model mapping a full history to a `K_P`-step prediction.
pub trait MotionPredictor: Send + Sync {
    /// `K_I`.
    fn history_len(&self) -> usize;
    /// `K_P`.
    fn horizon(&self) -> usize;
    fn predict(&self, history: &MotionHistory) -> Result<MotionPrediction>;
    /// False while a learned model is missing.
    fn is_ready(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    LastFrame,
    ConstantVelocity,
    RidgeDct,
}

fn check_history(history: &MotionHistory, k_i: usize, joints: usize) -> Result<()> {
    if history.len() != k_i {
        return Err(PredictError::HistoryIncomplete {
            needed: k_i,
            have: history.len(),
        });
    }
    if history.joints() != joints {
        return Err(PredictError::DimensionMismatch {
            what: format!(
                "history has {} joints, predictor expects {joints}",
                history.joints()
            ),
        });
    }
    Ok(())
}

/// Last covariance grown by `(k·Δt·σ_v)²·I` at horizon step `k`.
fn grown_covariances(last: &PoseCovariances, k: usize, dt: f64, sigma_v: f64) -> PoseCovariances {
    let s = k as f64 * dt * sigma_v;
    PoseCovariances::new(
        last.covs
            .iter()
            .map(|c| c + Matrix3::identity() * s * s)
            .collect(),
    )
}

/// Repeats the last observed pose over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct LastFrame {
    cfg: PredictorConfig,
}

impl LastFrame {
    pub fn new(cfg: PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

impl MotionPredictor for LastFrame {
    fn history_len(&self) -> usize {
        self.cfg.k_i
    }

    fn horizon(&self) -> usize {
        self.cfg.k_p
    }

    fn predict(&self, history: &MotionHistory) -> Result<MotionPrediction> {
        check_history(history, self.cfg.k_i, self.cfg.joints)?;
        let (last, last_cov) = history.last().expect("history checked non-empty");
        let dt = history.dt();
        let (poses, covs) = (1..=self.cfg.k_p)
            .map(|k| {
                (
                    Pose::new(last.joints.clone(), last.timestamp + k as f64 * dt),
                    grown_covariances(last_cov, k, dt, self.cfg.sigma_v),
                )
            })
            .unzip();
        Ok(MotionPrediction::from_parts(poses, covs))
    }
}

/// Linear extrapolation from the last two poses.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantVelocity {
    cfg: PredictorConfig,
}

impl ConstantVelocity {
    pub fn new(cfg: PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.k_i < 2 {
            return Err(PredictError::InvalidConfig(
                "constant velocity needs at least two history frames".into(),
            ));
        }
        Ok(Self { cfg })
    }
}

impl MotionPredictor for ConstantVelocity {
    fn history_len(&self) -> usize {
        self.cfg.k_i
    }

    fn horizon(&self) -> usize {
        self.cfg.k_p
    }

    fn predict(&self, history: &MotionHistory) -> Result<MotionPrediction> {
        check_history(history, self.cfg.k_i, self.cfg.joints)?;
        let n = history.len();
        let (prev, last) = (&history.poses[n - 2], &history.poses[n - 1]);
        let last_cov = &history.covs[n - 1];
        let step: Vec<Vector3<f64>> = last
            .joints
            .iter()
            .zip(&prev.joints)
            .map(|(a, b)| a - b)
            .collect();
        let dt = history.dt();
        let (poses, covs) = (1..=self.cfg.k_p)
            .map(|k| {
                let joints = last
                    .joints
                    .iter()
                    .zip(&step)
                    .map(|(p, s)| p + s * k as f64)
                    .collect();
                (
                    Pose::new(joints, last.timestamp + k as f64 * dt),
                    grown_covariances(last_cov, k, dt, self.cfg.sigma_v),
                )
            })
            .unzip();
        Ok(MotionPrediction::from_parts(poses, covs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(k_i: usize, joints: usize, velocity: Vector3<f64>, dt: f64) -> MotionHistory {
        let poses = (0..k_i)
            .map(|i| {
                let t = i as f64 * dt;
                Pose::new(
                    (0..joints)
                        .map(|j| Vector3::new(j as f64, 0.5, 2.0) + velocity * t)
                        .collect(),
                    t,
                )
            })
            .collect();
        let covs = vec![PoseCovariances::isotropic(joints, 0.01); k_i];
        MotionHistory::new(poses, covs, 1.0 / dt).unwrap()
    }

    #[test]
    fn last_frame_repeats_static_pose() {
        let cfg = PredictorConfig::new(50, 10, 3);
        let h = history(50, 3, Vector3::zeros(), 0.04);
        let pred = LastFrame::new(cfg).unwrap().predict(&h).unwrap();
        assert_eq!(pred.len(), 10);
        assert!(pred.poses.iter().all(|p| p.joints == h.poses[49].joints));
        pred.check_invariants().unwrap();
        // growth (k·Δt·σ_v)² on top of the input covariance
        let expected = 1e-4 + (10.0 * 0.04 * 0.5f64).powi(2);
        assert!((pred.covs[9].covs[0][(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_velocity_extrapolates() {
        let cfg = PredictorConfig::new(50, 10, 2);
        let h = history(50, 2, Vector3::new(1.0, 0.0, 0.0), 0.04);
        let pred = ConstantVelocity::new(cfg).unwrap().predict(&h).unwrap();
        let last = &h.poses[49];
        for (k, p) in pred.poses.iter().enumerate() {
            let disp = p.joints[0] - last.joints[0];
            assert!((disp.x - 0.04 * (k + 1) as f64).abs() < 1e-12);
            assert!(disp.y.abs() < 1e-12 && disp.z.abs() < 1e-12);
        }
    }

    #[test]
    fn short_history_rejected() {
        let cfg = PredictorConfig::new(50, 10, 1);
        let h = history(49, 1, Vector3::zeros(), 0.04);
        assert_eq!(
            LastFrame::new(cfg).unwrap().predict(&h),
            Err(PredictError::HistoryIncomplete {
                needed: 50,
                have: 49
            })
        );
    }

    #[test]
    fn irregular_timestamps_rejected() {
        let mut h = history(5, 1, Vector3::zeros(), 0.04);
        h.poses[3].timestamp += 0.01;
        assert!(matches!(
            MotionHistory::new(h.poses, h.covs, 25.0),
            Err(PredictError::Timestamps(_))
        ));
    }

    #[test]
    fn shift_marks_tail_invalid_and_ages() {
        let cfg = PredictorConfig::new(5, 4, 1);
        let h = history(5, 1, Vector3::zeros(), 0.04);
        let mut pred = LastFrame::new(cfg).unwrap().predict(&h).unwrap();
        let second = pred.poses[1].clone();
        pred.shift_left();
        assert_eq!(pred.poses[0], second);
        assert_eq!(pred.valid, vec![true, true, true, false]);
        assert_eq!(pred.horizon_index(0), 1);
        pred.check_invariants().unwrap();
        for _ in 0..3 {
            pred.shift_left();
        }
        assert_eq!(pred.valid_count(), 0);
        assert!(pred.first().is_none());
    }

    #[test]
    fn config_validation() {
        let mut cfg = PredictorConfig::new(10, 5, 2);
        cfg.dct_cutoff = 11;
        assert!(cfg.validate().is_err());
        cfg.dct_cutoff = 4;
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }
}
