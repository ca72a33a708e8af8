//! OOD scoring interface, reference scorers, and threshold calibration.
//!
//! A score is a finite real where larger means further from the training
//! distribution. A threshold `τ` is the `⌈(n+1)(1−ε_OOD)⌉`-th smallest
//! calibration score; a score is OOD iff it is strictly greater than `τ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{conformal_rank, min_calibration_size};
use crate::geometry::StereoObservation;
use crate::predict::MotionHistory;

/// Score assigned to frames without a detected human.
pub const MISSING_SCORE: f64 = f64::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OodError {
    #[error("insufficient calibration data: need at least {needed} scores, have {have}")]
    InsufficientCalibrationData { needed: usize, have: usize },
    #[error("OOD level {0} is outside (0, 1)")]
    InvalidEpsilon(f64),
    #[error("reference covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: features have {features} entries, reference {reference}")]
    DimensionMismatch { features: usize, reference: usize },
    #[error("observation carries no precomputed OOD score")]
    MissingScore,
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = OodError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Pose2d,
    Motion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub value: f64,
    pub source: ScoreSource,
}

impl OodScore {
    pub fn new(value: f64, source: ScoreSource) -> Result<Self> {
        if !value.is_finite() {
            return Err(OodError::NonFinite(format!("score {value}")));
        }
        Ok(Self { value, source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodThreshold {
    pub tau: f64,
    pub epsilon_ood: f64,
    pub n_cal: usize,
}

impl OodThreshold {
    /// Threshold that never flags a finite score.
    pub fn permissive() -> Self {
        Self {
            tau: f64::MAX,
            epsilon_ood: f64::MIN_POSITIVE,
            n_cal: 0,
        }
    }
}

pub fn calibrate_threshold(scores: &[f64], epsilon_ood: f64) -> Result<OodThreshold> {
    if !(epsilon_ood > 0.0 && epsilon_ood < 1.0) {
        return Err(OodError::InvalidEpsilon(epsilon_ood));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(OodError::NonFinite(format!("calibration score {bad}")));
    }
    let rank = conformal_rank(scores.len(), epsilon_ood)
        .map_err(|_| OodError::InvalidEpsilon(epsilon_ood))?
        .ok_or_else(|| OodError::InsufficientCalibrationData {
            needed: min_calibration_size(epsilon_ood).unwrap_or(usize::MAX),
            have: scores.len(),
        })?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(OodThreshold {
        tau: sorted[rank - 1],
        epsilon_ood,
        n_cal: scores.len(),
    })
}

/// `score > τ`; a score equal to the threshold is in distribution.
pub fn is_ood(score: &OodScore, threshold: &OodThreshold) -> bool {
    score.value > threshold.tau
}

/// Gaussian reference statistics of in-distribution feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ReferenceDoc", into = "ReferenceDoc")]
pub struct GaussianReference {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    inv_factor: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct ReferenceDoc {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<ReferenceDoc> for GaussianReference {
    type Error = OodError;

    fn try_from(doc: ReferenceDoc) -> Result<Self> {
        let d = doc.mean.len();
        if doc.cov.len() != d || doc.cov.iter().any(|r| r.len() != d) {
            return Err(OodError::DimensionMismatch {
                features: d,
                reference: doc.cov.len(),
            });
        }
        GaussianReference::new(
            DVector::from_vec(doc.mean),
            DMatrix::from_fn(d, d, |r, c| doc.cov[r][c]),
        )
    }
}

impl From<GaussianReference> for ReferenceDoc {
    fn from(r: GaussianReference) -> Self {
        let d = r.mean.len();
        ReferenceDoc {
            mean: r.mean.iter().copied().collect(),
            cov: (0..d)
                .map(|i| (0..d).map(|j| r.cov[(i, j)]).collect())
                .collect(),
        }
    }
}

impl GaussianReference {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(OodError::DimensionMismatch {
                features: mean.len(),
                reference: cov.nrows(),
            });
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(OodError::NotPositiveDefinite)?;
        let inv_factor = chol
            .l()
            .try_inverse()
            .ok_or(OodError::NotPositiveDefinite)?;
        Ok(Self {
            mean,
            cov,
            inv_factor,
        })
    }

    /// Sample mean and covariance of `samples` with `ridge·I` added.
    pub fn fit(samples: &[Vec<f64>], ridge: f64) -> Result<Self> {
        let first = samples
            .first()
            .ok_or(OodError::InsufficientCalibrationData { needed: 2, have: 0 })?;
        let d = first.len();
        if samples.len() < 2 {
            return Err(OodError::InsufficientCalibrationData {
                needed: 2,
                have: samples.len(),
            });
        }
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(OodError::DimensionMismatch {
                features: bad.len(),
                reference: d,
            });
        }
        let n = samples.len() as f64;
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        cov += DMatrix::identity(d, d) * ridge;
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `√((x−μ)ᵀ Σ⁻¹ (x−μ))`.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(OodError::DimensionMismatch {
                features: x.len(),
                reference: self.dim(),
            });
        }
        let z = &self.inv_factor * (DVector::from_column_slice(x) - &self.mean);
        Ok(z.norm())
    }
}

/// Mahalanobis distance of `features` from a Gaussian reference.
pub fn score_mahalanobis(
    features: &[f64],
    reference_mean: &[f64],
    reference_cov: &DMatrix<f64>,
    source: ScoreSource,
) -> Result<OodScore> {
    let reference = GaussianReference::new(
        DVector::from_column_slice(reference_mean),
        reference_cov.clone(),
    )?;
    OodScore::new(reference.distance(features)?, source)
}

/// Scores a stereo frame for the 2D pose estimator.
pub trait PoseOodScorer: Send + Sync {
    fn score(&self, obs: &StereoObservation) -> Result<OodScore>;
}

/// Scores a pose history for the motion predictor.
pub trait MotionOodScorer: Send + Sync {
    fn score(&self, history: &MotionHistory) -> Result<OodScore>;
}

/// Returns the same value for every input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantScorer(pub f64);

impl PoseOodScorer for ConstantScorer {
    fn score(&self, obs: &StereoObservation) -> Result<OodScore> {
        let v = if obs.missing { MISSING_SCORE } else { self.0 };
        OodScore::new(v, ScoreSource::Pose2d)
    }
}

impl MotionOodScorer for ConstantScorer {
    fn score(&self, _history: &MotionHistory) -> Result<OodScore> {
        OodScore::new(self.0, ScoreSource::Motion)
    }
}

/// Uses the score the producer attached to the observation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PrecomputedScorer;

impl PoseOodScorer for PrecomputedScorer {
    fn score(&self, obs: &StereoObservation) -> Result<OodScore> {
        if obs.missing {
            return OodScore::new(MISSING_SCORE, ScoreSource::Pose2d);
        }
        OodScore::new(
            obs.ood_score.ok_or(OodError::MissingScore)?,
            ScoreSource::Pose2d,
        )
    }
}

/// Mahalanobis distance of the camera-1 feature vector; optionally the max
/// over both cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMahalanobis {
    pub reference: GaussianReference,
    pub both_cameras: bool,
}

impl PoseOodScorer for FeatureMahalanobis {
    fn score(&self, obs: &StereoObservation) -> Result<OodScore> {
        if obs.missing {
            return OodScore::new(MISSING_SCORE, ScoreSource::Pose2d);
        }
        let mut v = self.reference.distance(&obs.features)?;
        if self.both_cameras {
            v = v.max(self.reference.distance(&obs.features_cam2)?);
        }
        OodScore::new(v, ScoreSource::Pose2d)
    }
}

/// `[mean joint speed, max joint speed, mean joint acceleration]` over the
/// history (m/s, m/s, m/s²).
pub fn motion_features(history: &MotionHistory) -> Vec<f64> {
    let dt = history.dt();
    let mut speeds = Vec::new();
    let mut accels = Vec::new();
    for w in history.poses.windows(2) {
        for (a, b) in w[0].joints.iter().zip(&w[1].joints) {
            speeds.push((b - a).norm() / dt);
        }
    }
    for w in history.poses.windows(3) {
        for ((a, b), c) in w[0].joints.iter().zip(&w[1].joints).zip(&w[2].joints) {
            accels.push((c - 2.0 * b + a).norm() / (dt * dt));
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let max = speeds.iter().copied().fold(0.0, f64::max);
    let has_nan = speeds.iter().chain(&accels).any(|v| v.is_nan());
    if has_nan {
        return vec![f64::NAN; 3];
    }
    vec![mean(&speeds), max, mean(&accels)]
}

/// Mahalanobis distance of [`motion_features`]; histories containing
/// placeholder (non-finite) poses score as maximally OOD.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMahalanobis {
    pub reference: GaussianReference,
}

impl MotionOodScorer for MotionMahalanobis {
    fn score(&self, history: &MotionHistory) -> Result<OodScore> {
        let f = motion_features(history);
        if f.iter().any(|v| !v.is_finite()) {
            return OodScore::new(MISSING_SCORE, ScoreSource::Motion);
        }
        OodScore::new(self.reference.distance(&f)?, ScoreSource::Motion)
    }
}
