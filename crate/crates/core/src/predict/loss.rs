//! Gaussian negative log-likelihood and ℓ1 pose loss, used as metrics.
//!
//! Both average over the `J·K_P` (joint, horizon) cells:
//!
//! ```text
//! NLL  = 1/(J K_P) Σ_k Σ_j ½ log|C| + ½ dᵀ C⁻¹ d
//! pose = 1/(J K_P) Σ_k Σ_j ‖d‖₁
//! ```
//!
//! with `d = truth − predicted mean`. No `log 2π` constant is included.

use nalgebra::{Matrix3, Vector3};

use super::cholesky::{factor_from_params, CholeskyParams};
use super::{MotionPrediction, PredictError, Result};
use crate::geometry::Pose;

/// Determinants at or below this are treated as singular.
pub const SINGULAR_DET: f64 = 1e-300;

fn check_dims(pred: &MotionPrediction, truth: &[Pose]) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(PredictError::DimensionMismatch {
            what: format!(
                "{} predicted steps vs {} truth poses",
                pred.len(),
                truth.len()
            ),
        });
    }
    let joints = pred.joints();
    for (k, (p, t)) in pred.poses.iter().zip(truth).enumerate() {
        if !pred.valid[k] {
            return Err(PredictError::InvalidSlot { slot: k });
        }
        if p.len() != joints || t.len() != joints || pred.covs[k].len() != joints {
            return Err(PredictError::DimensionMismatch {
                what: format!("joint counts differ at horizon step {k}"),
            });
        }
    }
    Ok(joints)
}

fn cell_nll(c: &Matrix3<f64>, d: &Vector3<f64>) -> Result<f64> {
    if c.determinant() <= SINGULAR_DET {
        return Err(PredictError::SingularCovariance);
    }
    let chol = c.cholesky().ok_or(PredictError::NotPositiveDefinite)?;
    let l = chol.l_dirty();
    let log_det = 2.0 * (0..3).map(|i| l[(i, i)].ln()).sum::<f64>();
    let quad = d.dot(&chol.solve(d));
    Ok(0.5 * log_det + 0.5 * quad)
}

pub fn nll_loss(pred: &MotionPrediction, truth: &[Pose]) -> Result<f64> {
    let joints = check_dims(pred, truth)?;
    let cells = (joints * pred.len()) as f64;
    let mut total = 0.0;
    for ((t, p), c) in truth.iter().zip(&pred.poses).zip(&pred.covs) {
        for j in 0..joints {
            total += cell_nll(&c.covs[j], &(t.joints[j] - p.joints[j]))?;
        }
    }
    Ok(total / cells)
}

pub fn pose_loss(pred: &MotionPrediction, truth: &[Pose]) -> Result<f64> {
    let joints = check_dims(pred, truth)?;
    let cells = (joints * pred.len()) as f64;
    let total: f64 = pred
        .poses
        .iter()
        .zip(truth)
        .flat_map(|(p, t)| {
            p.joints
                .iter()
                .zip(&t.joints)
                .map(|(a, b)| (b - a).abs().sum())
        })
        .sum();
    Ok(total / cells)
}

/// `NLL + λ·pose`.
pub fn total_loss(pred: &MotionPrediction, truth: &[Pose], lambda: f64) -> Result<f64> {
    Ok(nll_loss(pred, truth)? + lambda * pose_loss(pred, truth)?)
}

fn check_param_dims(params: &[CholeskyParams], means: &[Pose], truth: &[Pose]) -> Result<()> {
    if params.len() != means.len() || means.len() != truth.len() {
        return Err(PredictError::DimensionMismatch {
            what: "parameter, mean and truth horizons differ".into(),
        });
    }
    for ((p, m), t) in params.iter().zip(means).zip(truth) {
        if p.joints.len() != m.len() || m.len() != t.len() {
            return Err(PredictError::DimensionMismatch {
                what: "joint counts differ".into(),
            });
        }
    }
    Ok(())
}

/// NLL evaluated directly from Cholesky parameters, `C = L·Lᵀ`.
pub fn nll_from_cholesky(params: &[CholeskyParams], means: &[Pose], truth: &[Pose]) -> Result<f64> {
    check_param_dims(params, means, truth)?;
    let mut total = 0.0;
    let mut cells = 0usize;
    for ((p, m), t) in params.iter().zip(means).zip(truth) {
        for ((theta, mu), y) in p.joints.iter().zip(&m.joints).zip(&t.joints) {
            let l = factor_from_params(theta);
            let z = l
                .solve_lower_triangular(&(y - mu))
                .ok_or(PredictError::SingularCovariance)?;
            total += theta[0] + theta[1] + theta[2] + 0.5 * z.norm_squared();
            cells += 1;
        }
    }
    Ok(total / cells as f64)
}

/// Analytic gradient of [`nll_from_cholesky`] with respect to every
/// Cholesky parameter, same layout as `params`.
///
/// With `z = L⁻¹d`, `∂(½‖z‖²)/∂L = −L⁻ᵀ z zᵀ` restricted to the lower
/// triangle; diagonal entries pick up the `exp` chain factor and the `+1`
/// from `½ log|C| = Σ ln Lᵢᵢ`.
pub fn nll_gradient_cholesky(
    params: &[CholeskyParams],
    means: &[Pose],
    truth: &[Pose],
) -> Result<Vec<CholeskyParams>> {
    check_param_dims(params, means, truth)?;
    let cells: usize = params.iter().map(|p| p.joints.len()).sum();
    let scale = 1.0 / cells as f64;
    let mut out = Vec::with_capacity(params.len());
    for ((p, m), t) in params.iter().zip(means).zip(truth) {
        let mut grads = Vec::with_capacity(p.joints.len());
        for ((theta, mu), y) in p.joints.iter().zip(&m.joints).zip(&t.joints) {
            let l = factor_from_params(theta);
            let z = l
                .solve_lower_triangular(&(y - mu))
                .ok_or(PredictError::SingularCovariance)?;
            let w = l
                .transpose()
                .solve_upper_triangular(&z)
                .ok_or(PredictError::SingularCovariance)?;
            // gradient of the quadratic term with respect to L
            let g = -(w * z.transpose());
            grads.push([
                scale * (1.0 + g[(0, 0)] * l[(0, 0)]),
                scale * (1.0 + g[(1, 1)] * l[(1, 1)]),
                scale * (1.0 + g[(2, 2)] * l[(2, 2)]),
                scale * g[(1, 0)],
                scale * g[(2, 0)],
                scale * g[(2, 1)],
            ]);
        }
        out.push(CholeskyParams::new(grads));
    }
    Ok(out)
}
