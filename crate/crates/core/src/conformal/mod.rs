//! Split-conformal sphere prediction sets for predicted joint positions.
//!
//! The non-conformity of a residual `d` under predicted covariance `C` is
//! `‖d‖₂ / √λ_max(C)`. Calibration takes, independently for each
//! (horizon, joint) cell, the `⌈(n+1)(1−ε)⌉`-th smallest of `n` calibration
//! scores as `α`. The sphere `B(p̂, α·√λ_max(C))` then contains the true
//! joint position with probability at least `1 − ε` under exchangeability.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::predict::MotionPrediction;
use crate::serde_util;

mod eigen;

pub use eigen::{lambda_max, symmetric_eigenvalues, SYMMETRY_TOL};

/// Maximal human speed (m/s) of the ISO 13855 reachability model.
pub const DEFAULT_V_MAX: f64 = 1.6;
/// Default per-link body padding (m) for occupancies.
pub const DEFAULT_PADDING: f64 = 0.1;
/// Slack on `(n+1)(1−ε)` before rounding up, absorbing binary rounding of ε.
const RANK_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformalError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("insufficient calibration data: need at least {needed} scores, have {have}")]
    InsufficientCalibrationData { needed: usize, have: usize },
    #[error("miscoverage level {0} is outside (0, 1)")]
    InvalidEpsilon(f64),
    #[error("requested time {t} precedes set time {set_time}")]
    TimeBeforeSet { t: f64, set_time: f64 },
    #[error("length mismatch: {sets} sets vs {truths} truths")]
    LengthMismatch { sets: usize, truths: usize },
    #[error("spheres have different timestamps")]
    MixedTimestamps,
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("calibration table shape: {0}")]
    Shape(String),
}

pub type Result<T, E = ConformalError> = std::result::Result<T, E>;

/// 1-based rank of the finite-sample conformal quantile among `n` scores.
///
/// `None` when `⌈(n+1)(1−ε)⌉ > n`, i.e. the quantile would be `+∞`.
pub fn conformal_rank(n: usize, epsilon: f64) -> Result<Option<usize>> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ConformalError::InvalidEpsilon(epsilon));
    }
    let x = (n as f64 + 1.0) * (1.0 - epsilon);
    let rank = ((x - RANK_SLACK).ceil().max(1.0)) as usize;
    Ok((rank <= n).then_some(rank))
}

/// Smallest `n` for which [`conformal_rank`] is finite.
pub fn min_calibration_size(epsilon: f64) -> Result<usize> {
    // n ≥ (1 − ε)/ε, then walk up past rounding
    let mut n = ((1.0 - epsilon) / epsilon).floor().max(1.0) as usize;
    n = n.saturating_sub(1).max(1);
    while conformal_rank(n, epsilon)?.is_none() {
        n += 1;
    }
    Ok(n)
}

/// The finite-sample `1 − ε` conformal quantile of `scores`.
pub fn conformal_quantile(scores: &[f64], epsilon: f64) -> Result<f64> {
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(ConformalError::NonFinite(format!("score {bad}")));
    }
    let rank = conformal_rank(scores.len(), epsilon)?.ok_or(
        ConformalError::InsufficientCalibrationData {
            needed: min_calibration_size(epsilon)?,
            have: scores.len(),
        },
    )?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

fn check_pd(c: &Matrix3<f64>) -> Result<()> {
    if c.iter().any(|v| !v.is_finite()) || c.cholesky().is_none() {
        return Err(ConformalError::NotPositiveDefinite);
    }
    Ok(())
}

/// `‖d‖₂ / √λ_max(C)`.
pub fn nonconformity(d: &Vector3<f64>, c: &Matrix3<f64>) -> Result<f64> {
    check_pd(c)?;
    let lmax = lambda_max(c)?;
    if !(lmax > 0.0) {
        return Err(ConformalError::NotPositiveDefinite);
    }
    Ok(d.norm() / lmax.sqrt())
}

/// Per-(horizon, joint) quantile table `α[k][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibrationDoc")]
pub struct ConformalCalibration {
    pub epsilon: f64,
    /// Smallest calibration sample count over all cells.
    pub n_cal: usize,
    pub alpha: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct CalibrationDoc {
    epsilon: f64,
    n_cal: usize,
    alpha: Vec<Vec<f64>>,
}

impl TryFrom<CalibrationDoc> for ConformalCalibration {
    type Error = ConformalError;

    fn try_from(doc: CalibrationDoc) -> Result<Self> {
        let calib = ConformalCalibration {
            epsilon: doc.epsilon,
            n_cal: doc.n_cal,
            alpha: doc.alpha,
        };
        calib.validate()?;
        Ok(calib)
    }
}

impl ConformalCalibration {
    pub fn horizon(&self) -> usize {
        self.alpha.len()
    }

    pub fn joints(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    pub fn alpha(&self, k: usize, joint: usize) -> f64 {
        self.alpha[k][joint]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ConformalError::InvalidEpsilon(self.epsilon));
        }
        let j = self.joints();
        if self.alpha.is_empty() || j == 0 || self.alpha.iter().any(|row| row.len() != j) {
            return Err(ConformalError::Shape(
                "alpha must be a non-empty K_P × J table".into(),
            ));
        }
        if self
            .alpha
            .iter()
            .flatten()
            .any(|a| !(a.is_finite() && *a >= 0.0))
        {
            return Err(ConformalError::Shape(
                "alpha entries must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Calibrates every (horizon, joint) cell independently; `scores[k][j]` is
/// that cell's list of calibration non-conformity scores.
pub fn calibrate(scores: &[Vec<Vec<f64>>], epsilon: f64) -> Result<ConformalCalibration> {
    if scores.is_empty() || scores[0].is_empty() {
        return Err(ConformalError::EmptyInput);
    }
    let joints = scores[0].len();
    if scores.iter().any(|row| row.len() != joints) {
        return Err(ConformalError::Shape(
            "every horizon needs the same joint count".into(),
        ));
    }
    let alpha = scores
        .iter()
        .map(|row| {
            row.iter()
                .map(|cell| conformal_quantile(cell, epsilon))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let n_cal = scores.iter().flatten().map(Vec::len).min().unwrap_or(0);
    Ok(ConformalCalibration {
        epsilon,
        n_cal,
        alpha,
    })
}

/// Per-cell scores of one prediction against its truth.
pub fn prediction_scores(pred: &MotionPrediction, truth: &[Pose]) -> Result<Vec<Vec<f64>>> {
    if pred.len() != truth.len() {
        return Err(ConformalError::LengthMismatch {
            sets: pred.len(),
            truths: truth.len(),
        });
    }
    pred.poses
        .iter()
        .zip(&pred.covs)
        .zip(truth)
        .map(|((p, c), t)| {
            p.joints
                .iter()
                .zip(&c.covs)
                .zip(&t.joints)
                .map(|((mean, cov), y)| nonconformity(&(y - mean), cov))
                .collect()
        })
        .collect()
}

/// A ball around a predicted joint position at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereSet {
    pub joint: usize,
    #[serde(with = "serde_util::vec3")]
    pub center: Vector3<f64>,
    pub radius: f64,
    pub time: f64,
}

impl SphereSet {
    pub fn volume(&self) -> f64 {
        sphere_volume(self.radius)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (p - self.center).norm() <= self.radius
    }

    /// `other ⊆ self`.
    pub fn contains_sphere(&self, other: &SphereSet) -> bool {
        (other.center - self.center).norm() + other.radius <= self.radius
    }
}

pub fn sphere_volume(radius: f64) -> f64 {
    4.0 / 3.0 * std::f64::consts::PI * radius.powi(3)
}

/// `B(mean, α·√λ_max(C))`.
pub fn sphere_set(
    mean: &Vector3<f64>,
    c: &Matrix3<f64>,
    alpha: f64,
    joint: usize,
    time: f64,
) -> Result<SphereSet> {
    check_pd(c)?;
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(ConformalError::NonFinite(format!("alpha {alpha}")));
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(ConformalError::NonFinite("sphere center".into()));
    }
    Ok(SphereSet {
        joint,
        center: *mean,
        radius: alpha * lambda_max(c)?.sqrt(),
        time,
    })
}

/// The set `s` carried forward to time `t`: radius grows by
/// `(t − s.time)·v_max`, center unchanged.
pub fn extend_in_time(s: &SphereSet, t: f64, v_max: f64) -> Result<SphereSet> {
    if t < s.time {
        return Err(ConformalError::TimeBeforeSet {
            t,
            set_time: s.time,
        });
    }
    Ok(SphereSet {
        radius: s.radius + (t - s.time) * v_max,
        time: t,
        ..s.clone()
    })
}

/// Sphere sets for every valid slot of a prediction (`None` for invalid
/// slots). Slot `i` uses the quantiles of horizon `i + age`.
pub fn prediction_sets(
    pred: &MotionPrediction,
    calib: &ConformalCalibration,
) -> Result<Vec<Option<Vec<SphereSet>>>> {
    if pred.joints() != calib.joints() {
        return Err(ConformalError::Shape(format!(
            "prediction has {} joints, calibration {}",
            pred.joints(),
            calib.joints()
        )));
    }
    (0..pred.len())
        .map(|slot| {
            if !pred.valid[slot] {
                return Ok(None);
            }
            let k = pred.horizon_index(slot);
            if k >= calib.horizon() {
                return Err(ConformalError::Shape(format!(
                    "horizon {k} exceeds calibrated horizon {}",
                    calib.horizon()
                )));
            }
            let pose = &pred.poses[slot];
            pose.joints
                .iter()
                .zip(&pred.covs[slot].covs)
                .enumerate()
                .map(|(j, (mean, cov))| sphere_set(mean, cov, calib.alpha(k, j), j, pose.timestamp))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        })
        .collect()
}

/// Sets at an arbitrary time `t`: the latest slot with `t_k ≤ t`, extended
/// by `(t − t_k)·v_max`.
pub fn sets_at_time(slots: &[Vec<SphereSet>], t: f64, v_max: f64) -> Result<Vec<SphereSet>> {
    let base = slots
        .iter()
        .filter(|s| s.first().is_some_and(|f| f.time <= t))
        .max_by(|a, b| a[0].time.total_cmp(&b[0].time));
    match base {
        Some(sets) => sets.iter().map(|s| extend_in_time(s, t, v_max)).collect(),
        None => Err(ConformalError::TimeBeforeSet {
            t,
            set_time: slots
                .iter()
                .filter_map(|s| s.first())
                .map(|s| s.time)
                .fold(f64::NAN, f64::min),
        }),
    }
}

/// Constant-velocity reachability: a ball of radius `(t − t_last)·v_max`
/// around every last observed joint.
pub fn iso_baseline_set(last_pose: &Pose, t: f64, v_max: f64) -> Result<Vec<SphereSet>> {
    if t < last_pose.timestamp {
        return Err(ConformalError::TimeBeforeSet {
            t,
            set_time: last_pose.timestamp,
        });
    }
    let radius = (t - last_pose.timestamp) * v_max;
    Ok(last_pose
        .joints
        .iter()
        .enumerate()
        .map(|(joint, p)| SphereSet {
            joint,
            center: *p,
            radius,
            time: t,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageVolume {
    pub coverage: f64,
    pub mean_volume: f64,
    pub count: usize,
}

/// Fraction of truths inside their sets and the mean set volume.
pub fn coverage_and_volume(sets: &[SphereSet], truths: &[Vector3<f64>]) -> Result<CoverageVolume> {
    if sets.len() != truths.len() {
        return Err(ConformalError::LengthMismatch {
            sets: sets.len(),
            truths: truths.len(),
        });
    }
    if sets.is_empty() {
        return Err(ConformalError::EmptyInput);
    }
    let n = sets.len() as f64;
    let covered = sets
        .iter()
        .zip(truths)
        .filter(|(s, t)| s.contains(t))
        .count();
    let volume: f64 = sets.iter().map(SphereSet::volume).sum();
    Ok(CoverageVolume {
        coverage: covered as f64 / n,
        mean_volume: volume / n,
        count: sets.len(),
    })
}

/// Joint-pose coverage: a pose counts as covered only when every joint is.
pub fn pose_coverage(sets: &[Vec<SphereSet>], truths: &[Vec<Vector3<f64>>]) -> Result<f64> {
    if sets.len() != truths.len() {
        return Err(ConformalError::LengthMismatch {
            sets: sets.len(),
            truths: truths.len(),
        });
    }
    if sets.is_empty() {
        return Err(ConformalError::EmptyInput);
    }
    let mut covered = 0usize;
    for (s, t) in sets.iter().zip(truths) {
        if s.len() != t.len() {
            return Err(ConformalError::LengthMismatch {
                sets: s.len(),
                truths: t.len(),
            });
        }
        if s.iter().zip(t).all(|(s, t)| s.contains(t)) {
            covered += 1;
        }
    }
    Ok(covered as f64 / sets.len() as f64)
}

/// Joint spheres at one instant, padded for body thickness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub time: f64,
    pub padding: f64,
    pub spheres: Vec<SphereSet>,
}

pub fn occupancy_union(spheres: &[SphereSet], padding: f64) -> Result<Occupancy> {
    let first = spheres.first().ok_or(ConformalError::EmptyInput)?;
    if spheres.iter().any(|s| s.time != first.time) {
        return Err(ConformalError::MixedTimestamps);
    }
    if !(padding >= 0.0) {
        return Err(ConformalError::NonFinite(format!("padding {padding}")));
    }
    Ok(Occupancy {
        time: first.time,
        padding,
        spheres: spheres
            .iter()
            .map(|s| SphereSet {
                radius: s.radius + padding,
                ..s.clone()
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonconformity_examples() {
        let i = Matrix3::identity();
        assert_eq!(
            nonconformity(&Vector3::new(1.0, 0.0, 0.0), &i).unwrap(),
            1.0
        );
        assert_eq!(nonconformity(&Vector3::zeros(), &(i * 3.0)).unwrap(), 0.0);
        let c = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((nonconformity(&Vector3::new(3.0, 4.0, 0.0), &c).unwrap() - 2.5).abs() < 1e-14);
        let bad = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
        assert_eq!(
            nonconformity(&Vector3::zeros(), &bad),
            Err(ConformalError::NotPositiveDefinite)
        );
    }

    #[test]
    fn quantile_examples() {
        let ones = vec![1.0; 37];
        assert_eq!(conformal_quantile(&ones, 0.2).unwrap(), 1.0);
        let ramp: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        assert_eq!(conformal_quantile(&ramp, 0.1).unwrap(), 91.0);
        let fifty: Vec<f64> = (1..=50).map(f64::from).collect();
        assert_eq!(
            conformal_quantile(&fifty, 0.01),
            Err(ConformalError::InsufficientCalibrationData {
                needed: 99,
                have: 50
            })
        );
        assert_eq!(min_calibration_size(0.5).unwrap(), 1);
        assert_eq!(conformal_rank(3, 0.5).unwrap(), Some(2));
        assert!(conformal_rank(10, 0.0).is_err());
    }

    #[test]
    fn sphere_examples() {
        let i = Matrix3::identity();
        assert_eq!(
            sphere_set(&Vector3::zeros(), &i, 2.0, 0, 0.0)
                .unwrap()
                .radius,
            2.0
        );
        assert_eq!(
            sphere_set(&Vector3::zeros(), &i, 0.0, 0, 0.0)
                .unwrap()
                .radius,
            0.0
        );
        let c = Matrix3::from_diagonal(&Vector3::new(0.04, 0.01, 0.01));
        assert!(
            (sphere_set(&Vector3::zeros(), &c, 3.0, 0, 0.0)
                .unwrap()
                .radius
                - 0.6)
                .abs()
                < 1e-14
        );
    }

    #[test]
    fn extension_examples() {
        let s = SphereSet {
            joint: 0,
            center: Vector3::new(1.0, 2.0, 3.0),
            radius: 0.2,
            time: 1.0,
        };
        assert_eq!(extend_in_time(&s, 1.0, 1.6).unwrap(), s);
        let grown = extend_in_time(&s, 1.1, 1.6).unwrap();
        assert!((grown.radius - 0.36).abs() < 1e-12);
        assert_eq!(grown.center, s.center);
        assert_eq!(extend_in_time(&s, 1.04, 0.0).unwrap().radius, 0.2);
        assert!(matches!(
            extend_in_time(&s, 0.9, 1.6),
            Err(ConformalError::TimeBeforeSet { .. })
        ));
    }

    #[test]
    fn iso_examples() {
        let pose = Pose::new(vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)], 2.0);
        assert!(iso_baseline_set(&pose, 2.0, 1.6)
            .unwrap()
            .iter()
            .all(|s| s.radius == 0.0));
        let sets = iso_baseline_set(&pose, 2.4, 1.6).unwrap();
        assert!((sets[0].radius - 0.64).abs() < 1e-12);
        assert!((sets[0].volume() - 1.098).abs() < 1e-3);
        assert!(iso_baseline_set(&pose, 1.9, 1.6).is_err());
    }

    #[test]
    fn coverage_examples() {
        let centers: Vec<Vector3<f64>> =
            (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let sets: Vec<SphereSet> = centers
            .iter()
            .enumerate()
            .map(|(j, c)| SphereSet {
                joint: j,
                center: *c,
                radius: 0.0,
                time: 0.0,
            })
            .collect();
        assert_eq!(coverage_and_volume(&sets, &centers).unwrap().coverage, 1.0);
        let offset: Vec<_> = centers
            .iter()
            .map(|c| c + Vector3::new(0.0, 0.1, 0.0))
            .collect();
        let cv = coverage_and_volume(&sets, &offset).unwrap();
        assert_eq!((cv.coverage, cv.mean_volume), (0.0, 0.0));
        assert!(matches!(
            coverage_and_volume(&sets[..3], &centers),
            Err(ConformalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn occupancy_examples() {
        let s = SphereSet {
            joint: 0,
            center: Vector3::zeros(),
            radius: 0.2,
            time: 0.5,
        };
        assert_eq!(
            occupancy_union(std::slice::from_ref(&s), 0.0)
                .unwrap()
                .spheres[0],
            s
        );
        let padded = occupancy_union(std::slice::from_ref(&s), 0.1).unwrap();
        assert!((padded.spheres[0].radius - 0.3).abs() < 1e-15);
        assert!(padded.spheres[0].contains_sphere(&s));
        let other = SphereSet {
            time: 0.6,
            ..s.clone()
        };
        assert_eq!(
            occupancy_union(&[s, other], 0.1),
            Err(ConformalError::MixedTimestamps)
        );
        assert_eq!(occupancy_union(&[], 0.1), Err(ConformalError::EmptyInput));
    }

    #[test]
    fn calibration_document() {
        let json = r#"{"epsilon": 0.1, "n_cal": 100, "alpha": [[1.0, 2.0], [1.5, 2.5]]}"#;
        let c: ConformalCalibration = serde_json::from_str(json).unwrap();
        assert_eq!((c.horizon(), c.joints()), (2, 2));
        let bad = r#"{"epsilon": 0.1, "n_cal": 100, "alpha": [[1.0, -2.0]]}"#;
        assert!(serde_json::from_str::<ConformalCalibration>(bad).is_err());
    }

    #[test]
    fn sets_at_time_selects_latest_slot() {
        let mk = |t: f64| {
            vec![SphereSet {
                joint: 0,
                center: Vector3::zeros(),
                radius: 0.1,
                time: t,
            }]
        };
        let slots = vec![mk(0.04), mk(0.08), mk(0.12)];
        let s = sets_at_time(&slots, 0.10, 1.6).unwrap();
        assert_eq!(s[0].time, 0.10);
        assert!((s[0].radius - (0.1 + 0.02 * 1.6)).abs() < 1e-12);
        assert!(sets_at_time(&slots, 0.0, 1.6).is_err());
    }
}
