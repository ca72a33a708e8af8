//! Uncertainty-aware human pose pipeline.
//!
//! * [`geometry`]: stereo DLT triangulation and first-order covariance
//!   propagation from 2D keypoint covariances to 3D joint covariances.
//! * [`predict`]: motion predictors with heteroscedastic covariances, the
//!   orthonormal DCT, the Cholesky covariance parameterization and the
//!   NLL / ℓ1 losses.
//! * [`conformal`]: split-conformal calibration of per-(horizon, joint)
//!   quantiles and the sphere prediction sets built from them.
//! * [`ood`]: pluggable OOD scorers and threshold calibration.
//! * [`pipeline`]: the streaming state machine that gates predictions on OOD
//!   scores and reuses earlier predictions while inputs are unreliable.
//! * [`harness`]: synthetic data, dataset ingestion, metrics and experiment
//!   drivers.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformal;
pub mod geometry;
pub mod harness;
pub mod ood;
pub mod pipeline;
pub mod predict;
mod serde_util;

pub use conformal::{ConformalCalibration, Occupancy, SphereSet};
pub use geometry::{CameraModel, Detection2D, Pose, PoseCovariances, StereoObservation};
pub use ood::{OodScore, OodThreshold};
pub use pipeline::{PipelineConfig, PipelineContext, PipelineState, StepOutput, StepStatus};
pub use predict::{
    MotionHistory, MotionPrediction, MotionPredictor, PredictorConfig, PredictorKind,
};
