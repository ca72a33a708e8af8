//! Log-diagonal Cholesky parameterization of 3×3 covariances.
//!
//! Six unconstrained reals `[ln L₀₀, ln L₁₁, ln L₂₂, L₁₀, L₂₀, L₂₁]` map to
//! `C = L·Lᵀ`, which is positive definite for every finite parameter vector.

use nalgebra::Matrix3;

use super::{PredictError, Result};
use crate::geometry::PoseCovariances;

/// Parameters of one 3×3 factor.
pub type CholeskyFactorParams = [f64; 6];

/// Per-joint Cholesky parameters for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyParams {
    pub joints: Vec<CholeskyFactorParams>,
}

impl CholeskyParams {
    pub fn new(joints: Vec<CholeskyFactorParams>) -> Self {
        Self { joints }
    }

    pub fn zeros(joints: usize) -> Self {
        Self {
            joints: vec![[0.0; 6]; joints],
        }
    }
}

pub fn factor_from_params(p: &CholeskyFactorParams) -> Matrix3<f64> {
    Matrix3::new(
        p[0].exp(),
        0.0,
        0.0,
        p[3],
        p[1].exp(),
        0.0,
        p[4],
        p[5],
        p[2].exp(),
    )
}

pub fn params_to_matrix(p: &CholeskyFactorParams) -> Matrix3<f64> {
    let l = factor_from_params(p);
    l * l.transpose()
}

pub fn matrix_to_params(c: &Matrix3<f64>) -> Result<CholeskyFactorParams> {
    let chol = c.cholesky().ok_or(PredictError::NotPositiveDefinite)?;
    let l = chol.l();
    if (0..3).any(|i| !(l[(i, i)] > 0.0)) {
        return Err(PredictError::NotPositiveDefinite);
    }
    Ok([
        l[(0, 0)].ln(),
        l[(1, 1)].ln(),
        l[(2, 2)].ln(),
        l[(1, 0)],
        l[(2, 0)],
        l[(2, 1)],
    ])
}

pub fn cholesky_to_cov(p: &CholeskyParams) -> PoseCovariances {
    PoseCovariances::new(p.joints.iter().map(params_to_matrix).collect())
}

pub fn cov_to_cholesky(c: &PoseCovariances) -> Result<CholeskyParams> {
    Ok(CholeskyParams::new(
        c.covs.iter().map(matrix_to_params).collect::<Result<_>>()?,
    ))
}
