//! Closed-form ridge regression in the DCT domain.
//!
//! Every (joint, axis) trajectory is expressed relative to its last observed
//! value. The first `dct_cutoff` DCT coefficients of that input window are
//! mapped by one shared `dct_cutoff × K_P` matrix to the DCT coefficients of
//! the `K_P` future offsets, which the inverse DCT turns back into positions.
//!
//! The covariance head is the per-(horizon, joint) second moment of the
//! training residuals, scaled up when the current input covariance is larger
//! than the typical training input covariance.

use std::io::{Read, Write};

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::dct::DctBasis;
use super::{
    check_history, MotionHistory, MotionPrediction, MotionPredictor, PredictError, PredictorConfig,
    Result,
};
use crate::geometry::{Pose, PoseCovariances};
use crate::serde_util;

/// Windows required per retained coefficient.
pub const WINDOWS_PER_COEFF: usize = 10;
/// Variance floor (m²) added to the residual covariances.
pub const RESIDUAL_VARIANCE_FLOOR: f64 = 1e-8;

const FORMAT: &str = "confmotion.ridge_dct";
const VERSION: u32 = 1;

/// Fitted parameters; immutable after fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeDctModel {
    cfg: PredictorConfig,
    /// Row-major `dct_cutoff × K_P`.
    weights: Vec<f64>,
    /// `[k][j]` residual second moments.
    residual_covs: Vec<Vec<Matrix3<f64>>>,
    /// Mean trace of the last input covariance per joint over training.
    reference_trace: Vec<f64>,
    input_basis: DctBasis,
    output_basis: DctBasis,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    k_i: usize,
    k_p: usize,
    joints: usize,
    dct_cutoff: usize,
    ridge_mu: f64,
    sigma_v: f64,
    lambda: f64,
    weights: Vec<Vec<f64>>,
    residual_covs: Vec<Vec<[[f64; 3]; 3]>>,
    reference_trace: Vec<f64>,
}

fn relative_series(history: &MotionHistory, joint: usize, axis: usize) -> Vec<f64> {
    let last = history.poses[history.len() - 1].joints[joint][axis];
    history
        .poses
        .iter()
        .map(|p| p.joints[joint][axis] - last)
        .collect()
}

/// Fits the shared DCT-domain map on `(history, K_P future poses)` windows.
pub fn fit_ridge_dct(
    windows: &[(MotionHistory, Vec<Pose>)],
    cfg: &PredictorConfig,
) -> Result<RidgeDctModel> {
    cfg.validate()?;
    let needed = WINDOWS_PER_COEFF * cfg.dct_cutoff;
    if windows.len() < needed {
        return Err(PredictError::InsufficientData {
            needed,
            have: windows.len(),
        });
    }
    for (h, truth) in windows {
        check_history(h, cfg.k_i, cfg.joints)?;
        if truth.len() != cfg.k_p || truth.iter().any(|p| p.len() != cfg.joints) {
            return Err(PredictError::DimensionMismatch {
                what: format!(
                    "training target must hold {} poses of {} joints",
                    cfg.k_p, cfg.joints
                ),
            });
        }
    }

    let input_basis = DctBasis::new(cfg.k_i);
    let output_basis = DctBasis::new(cfg.k_p);
    let c = cfg.dct_cutoff;
    let mut gram = DMatrix::<f64>::zeros(c, c);
    let mut cross = DMatrix::<f64>::zeros(c, cfg.k_p);
    for (h, truth) in windows {
        for j in 0..cfg.joints {
            for a in 0..3 {
                let x = input_basis.forward_truncated(&relative_series(h, j, a), c);
                let last = h.poses[cfg.k_i - 1].joints[j][a];
                let future: Vec<f64> = truth.iter().map(|p| p.joints[j][a] - last).collect();
                let y = output_basis.forward(&future);
                for r in 0..c {
                    for s in 0..c {
                        gram[(r, s)] += x[r] * x[s];
                    }
                    for s in 0..cfg.k_p {
                        cross[(r, s)] += x[r] * y[s];
                    }
                }
            }
        }
    }
    for r in 0..c {
        gram[(r, r)] += cfg.ridge_mu;
    }
    let weights = match gram.clone().cholesky() {
        Some(chol) => chol.solve(&cross),
        None => gram.lu().solve(&cross).ok_or_else(|| {
            PredictError::InvalidConfig("ridge normal equations are singular".into())
        })?,
    };

    let mut model = RidgeDctModel {
        cfg: cfg.clone(),
        weights: (0..c)
            .flat_map(|r| (0..cfg.k_p).map(move |s| (r, s)))
            .map(|(r, s)| weights[(r, s)])
            .collect(),
        residual_covs: vec![vec![Matrix3::zeros(); cfg.joints]; cfg.k_p],
        reference_trace: vec![0.0; cfg.joints],
        input_basis,
        output_basis,
    };

    let n = windows.len() as f64;
    let mut moments = vec![vec![Matrix3::zeros(); cfg.joints]; cfg.k_p];
    let mut traces = vec![0.0; cfg.joints];
    for (h, truth) in windows {
        let means = model.predict_means(h);
        for (k, (pred, t)) in means.iter().zip(truth).enumerate() {
            for j in 0..cfg.joints {
                let d = t.joints[j] - pred[j];
                moments[k][j] += d * d.transpose();
            }
        }
        let last_cov = &h.covs[cfg.k_i - 1];
        for (tr, c) in traces.iter_mut().zip(&last_cov.covs) {
            *tr += c.trace();
        }
    }
    model.residual_covs = moments
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|m| m / n + Matrix3::identity() * RESIDUAL_VARIANCE_FLOOR)
                .collect()
        })
        .collect();
    model.reference_trace = traces.into_iter().map(|t| t / n).collect();
    Ok(model)
}

impl RidgeDctModel {
    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    /// Row-major `dct_cutoff × K_P` coefficient map.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn residual_covariance(&self, k: usize, joint: usize) -> &Matrix3<f64> {
        &self.residual_covs[k][joint]
    }

    #[allow(clippy::needless_range_loop)]
    fn predict_means(&self, history: &MotionHistory) -> Vec<Vec<Vector3<f64>>> {
        let (c, k_p) = (self.cfg.dct_cutoff, self.cfg.k_p);
        let mut out = vec![vec![Vector3::zeros(); self.cfg.joints]; k_p];
        let last = &history.poses[history.len() - 1];
        for j in 0..self.cfg.joints {
            for a in 0..3 {
                let x = self
                    .input_basis
                    .forward_truncated(&relative_series(history, j, a), c);
                let y: Vec<f64> = (0..k_p)
                    .map(|s| (0..c).map(|r| x[r] * self.weights[r * k_p + s]).sum())
                    .collect();
                for (k, v) in self.output_basis.inverse(&y).into_iter().enumerate() {
                    out[k][j][a] = last.joints[j][a] + v;
                }
            }
        }
        out
    }

    fn predicted_covariance(&self, k: usize, joint: usize, input: &Matrix3<f64>) -> Matrix3<f64> {
        let base = self.residual_covs[k][joint];
        let reference = self.reference_trace[joint];
        if reference > 0.0 {
            base * (input.trace() / reference).max(1.0)
        } else {
            base + input
        }
    }

    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        let k_p = self.cfg.k_p;
        let doc = ModelDoc {
            format: FORMAT.into(),
            version: VERSION,
            k_i: self.cfg.k_i,
            k_p,
            joints: self.cfg.joints,
            dct_cutoff: self.cfg.dct_cutoff,
            ridge_mu: self.cfg.ridge_mu,
            sigma_v: self.cfg.sigma_v,
            lambda: self.cfg.lambda,
            weights: self.weights.chunks(k_p).map(<[f64]>::to_vec).collect(),
            residual_covs: self
                .residual_covs
                .iter()
                .map(|row| row.iter().map(serde_util::to_rows).collect())
                .collect(),
            reference_trace: self.reference_trace.clone(),
        };
        serde_json::to_writer_pretty(writer, &doc)
            .map_err(|e| PredictError::Document(e.to_string()))
    }

    /// Loads a model and refuses it unless its `K_I`, `K_P` and joint count
    /// equal `expected`'s.
    pub fn load<R: Read>(reader: R, expected: &PredictorConfig) -> Result<Self> {
        let doc: ModelDoc =
            serde_json::from_reader(reader).map_err(|e| PredictError::Document(e.to_string()))?;
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(PredictError::Document(format!(
                "unsupported model format {} v{}",
                doc.format, doc.version
            )));
        }
        for (name, have, want) in [
            ("k_i", doc.k_i, expected.k_i),
            ("k_p", doc.k_p, expected.k_p),
            ("joints", doc.joints, expected.joints),
        ] {
            if have != want {
                return Err(PredictError::ModelMismatch(format!(
                    "model was fitted with {name} = {have}, configuration has {want}"
                )));
            }
        }
        let cfg = PredictorConfig {
            k_i: doc.k_i,
            k_p: doc.k_p,
            joints: doc.joints,
            lambda: doc.lambda,
            dct_cutoff: doc.dct_cutoff,
            ridge_mu: doc.ridge_mu,
            sigma_v: doc.sigma_v,
        };
        cfg.validate()?;
        let shape_ok = doc.weights.len() == cfg.dct_cutoff
            && doc.weights.iter().all(|r| r.len() == cfg.k_p)
            && doc.residual_covs.len() == cfg.k_p
            && doc.residual_covs.iter().all(|r| r.len() == cfg.joints)
            && doc.reference_trace.len() == cfg.joints;
        if !shape_ok {
            return Err(PredictError::Document(
                "array shapes do not match the header".into(),
            ));
        }
        Ok(Self {
            weights: doc.weights.concat(),
            residual_covs: doc
                .residual_covs
                .iter()
                .map(|row| row.iter().map(serde_util::from_rows).collect())
                .collect(),
            reference_trace: doc.reference_trace,
            input_basis: DctBasis::new(cfg.k_i),
            output_basis: DctBasis::new(cfg.k_p),
            cfg,
        })
    }
}

/// Ridge-DCT predictor; unusable until fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeDct {
    cfg: PredictorConfig,
    model: Option<RidgeDctModel>,
}

impl RidgeDct {
    pub fn new(cfg: PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, model: None })
    }

    pub fn from_model(model: RidgeDctModel) -> Self {
        Self {
            cfg: model.cfg.clone(),
            model: Some(model),
        }
    }

    pub fn fit(&mut self, windows: &[(MotionHistory, Vec<Pose>)]) -> Result<&RidgeDctModel> {
        self.model = Some(fit_ridge_dct(windows, &self.cfg)?);
        Ok(self.model.as_ref().expect("just fitted"))
    }

    pub fn model(&self) -> Option<&RidgeDctModel> {
        self.model.as_ref()
    }

    pub fn is_fitted(&self) -> bool {
        self.model.is_some()
    }
}

impl MotionPredictor for RidgeDct {
    fn history_len(&self) -> usize {
        self.cfg.k_i
    }

    fn horizon(&self) -> usize {
        self.cfg.k_p
    }

    fn is_ready(&self) -> bool {
        self.model.is_some()
    }

    fn predict(&self, history: &MotionHistory) -> Result<MotionPrediction> {
        let model = self.model.as_ref().ok_or(PredictError::ModelNotFitted)?;
        check_history(history, self.cfg.k_i, self.cfg.joints)?;
        let means = model.predict_means(history);
        let (last, last_cov) = history.last().expect("history checked non-empty");
        let dt = history.dt();
        let (poses, covs) = means
            .into_iter()
            .enumerate()
            .map(|(k, joints)| {
                let covs = (0..self.cfg.joints)
                    .map(|j| model.predicted_covariance(k, j, &last_cov.covs[j]))
                    .collect();
                (
                    Pose::new(joints, last.timestamp + (k + 1) as f64 * dt),
                    PoseCovariances::new(covs),
                )
            })
            .unzip();
        Ok(MotionPrediction::from_parts(poses, covs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_windows(n: usize, cfg: &PredictorConfig) -> Vec<(MotionHistory, Vec<Pose>)> {
        let dt = 0.04;
        (0..n)
            .map(|w| {
                let joints: Vec<Vector3<f64>> = (0..cfg.joints)
                    .map(|j| Vector3::new(0.1 * j as f64, 1.0 + 0.01 * w as f64, 2.5))
                    .collect();
                let poses = (0..cfg.k_i)
                    .map(|i| Pose::new(joints.clone(), i as f64 * dt))
                    .collect();
                let covs = vec![PoseCovariances::isotropic(cfg.joints, 0.01); cfg.k_i];
                let truth = (0..cfg.k_p)
                    .map(|k| Pose::new(joints.clone(), (cfg.k_i + k) as f64 * dt))
                    .collect();
                (MotionHistory::new(poses, covs, 25.0).unwrap(), truth)
            })
            .collect()
    }

    #[test]
    fn unfitted_model_refuses_to_predict() {
        let cfg = PredictorConfig::new(10, 5, 2);
        let windows = constant_windows(1, &cfg);
        let p = RidgeDct::new(cfg).unwrap();
        assert_eq!(p.predict(&windows[0].0), Err(PredictError::ModelNotFitted));
    }

    #[test]
    fn constant_pose_is_reproduced() {
        let mut cfg = PredictorConfig::new(20, 5, 3);
        cfg.dct_cutoff = 4;
        let windows = constant_windows(40, &cfg);
        let mut p = RidgeDct::new(cfg).unwrap();
        p.fit(&windows).unwrap();
        let pred = p.predict(&windows[7].0).unwrap();
        for (got, want) in pred.poses.iter().zip(&windows[7].1) {
            for (a, b) in got.joints.iter().zip(&want.joints) {
                assert!((a - b).norm() < 1e-6);
            }
        }
        pred.check_invariants().unwrap();
    }

    #[test]
    fn too_few_windows() {
        let mut cfg = PredictorConfig::new(20, 5, 1);
        cfg.dct_cutoff = 4;
        let windows = constant_windows(39, &cfg);
        assert_eq!(
            fit_ridge_dct(&windows, &cfg).unwrap_err(),
            PredictError::InsufficientData {
                needed: 40,
                have: 39
            }
        );
    }

    #[test]
    fn save_load_and_mismatch() {
        let mut cfg = PredictorConfig::new(20, 5, 2);
        cfg.dct_cutoff = 3;
        let model = fit_ridge_dct(&constant_windows(30, &cfg), &cfg).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = RidgeDctModel::load(buf.as_slice(), &cfg).unwrap();
        assert_eq!(back, model);

        let mut other = cfg.clone();
        other.k_p = 6;
        assert!(matches!(
            RidgeDctModel::load(buf.as_slice(), &other),
            Err(PredictError::ModelMismatch(_))
        ));
    }
}
