//! Orthonormal DCT-II along the temporal axis and its inverse (DCT-III).
//!
//! `X_k = s_k Σ_n x_n cos(π (n + ½) k / K)` with `s_0 = √(1/K)` and
//! `s_k = √(2/K)` otherwise, so the transform matrix is orthogonal and
//! coefficient `k` carries frequency `k / 2K` cycles per sample.

use std::f64::consts::PI;

/// Precomputed `K × K` orthonormal basis; row `k` is the `k`-th cosine.
#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    len: usize,
    rows: Vec<f64>,
}

impl DctBasis {
    pub fn new(len: usize) -> Self {
        assert!(len >= 1, "DCT length must be at least 1");
        let n = len as f64;
        let mut rows = Vec::with_capacity(len * len);
        for k in 0..len {
            let scale = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            rows.extend((0..len).map(|i| scale * (PI * (i as f64 + 0.5) * k as f64 / n).cos()));
        }
        Self { len, rows }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward(&self, series: &[f64]) -> Vec<f64> {
        assert_eq!(series.len(), self.len, "series length does not match basis");
        self.rows
            .chunks_exact(self.len)
            .map(|row| row.iter().zip(series).map(|(b, x)| b * x).sum())
            .collect()
    }

    /// The first `count` coefficients only.
    pub fn forward_truncated(&self, series: &[f64], count: usize) -> Vec<f64> {
        assert_eq!(series.len(), self.len, "series length does not match basis");
        self.rows
            .chunks_exact(self.len)
            .take(count)
            .map(|row| row.iter().zip(series).map(|(b, x)| b * x).sum())
            .collect()
    }

    pub fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(
            coeffs.len(),
            self.len,
            "coefficient length does not match basis"
        );
        let mut out = vec![0.0; self.len];
        for (row, &c) in self.rows.chunks_exact(self.len).zip(coeffs) {
            for (o, b) in out.iter_mut().zip(row) {
                *o += c * b;
            }
        }
        out
    }
}

/// Orthonormal DCT-II of `series`, coefficients ordered low to high frequency.
pub fn dct_forward(series: &[f64]) -> Vec<f64> {
    DctBasis::new(series.len()).forward(series)
}

/// Inverse of [`dct_forward`].
pub fn dct_inverse(coeffs: &[f64]) -> Vec<f64> {
    DctBasis::new(coeffs.len()).inverse(coeffs)
}
