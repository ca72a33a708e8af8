//! Closed-form eigenvalues of symmetric 3×3 matrices.
//!
//! With `q = tr(C)/3`, `p = √(‖C − qI‖²_F / 6)` and `B = (C − qI)/p`, the
//! eigenvalues are `q + 2p·cos(φ + 2πm/3)` for `m = 0, 1, 2`, where
//! `φ = acos(det(B)/2)/3`. `m = 0` is the largest.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use super::ConformalError;

/// Absolute asymmetry tolerance, scaled by `max(1, max|Cᵢⱼ|)`.
pub const SYMMETRY_TOL: f64 = 1e-9;

fn check_symmetric(c: &Matrix3<f64>) -> Result<(), ConformalError> {
    let scale = c.amax().max(1.0);
    let asym = (c - c.transpose()).amax();
    if !(asym <= SYMMETRY_TOL * scale) {
        return Err(ConformalError::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Eigenvalues in descending order.
pub fn symmetric_eigenvalues(c: &Matrix3<f64>) -> Result<Vector3<f64>, ConformalError> {
    check_symmetric(c)?;
    let a = (c + c.transpose()) * 0.5;
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = a.trace() / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    if p2 == 0.0 {
        return Ok(Vector3::repeat(q));
    }
    let p = (p2 / 6.0).sqrt();
    let b = (a - Matrix3::identity() * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let largest = q + 2.0 * p * phi.cos();
    let smallest = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    let middle = 3.0 * q - largest - smallest;
    Ok(Vector3::new(largest, middle, smallest))
}

/// Largest eigenvalue of a symmetric 3×3 matrix.
pub fn lambda_max(c: &Matrix3<f64>) -> Result<f64, ConformalError> {
    Ok(symmetric_eigenvalues(c)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_cases() {
        assert_eq!(lambda_max(&Matrix3::identity()).unwrap(), 1.0);
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0));
        assert!((lambda_max(&d).unwrap() - 3.0).abs() < 1e-14);
        let ev = symmetric_eigenvalues(&d).unwrap();
        assert!((ev - Vector3::new(3.0, 2.0, 1.0)).norm() < 1e-14);
    }

    #[test]
    fn repeated_eigenvalues() {
        let d = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((lambda_max(&d).unwrap() - 4.0).abs() < 1e-14);
        let d = Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, -1.0));
        assert!((lambda_max(&d).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn asymmetric_rejected() {
        let mut c = Matrix3::identity();
        c[(0, 1)] = 1e-6;
        assert!(matches!(
            lambda_max(&c),
            Err(ConformalError::NotSymmetric { .. })
        ));
    }
}
