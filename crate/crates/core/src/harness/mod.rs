//! Synthetic data, dataset ingestion, metrics and experiment drivers.

use thiserror::Error;

use crate::conformal::ConformalError;
use crate::geometry::GeometryError;
use crate::ood::OodError;
use crate::pipeline::PipelineError;
use crate::predict::PredictError;

pub mod dataset;
pub mod experiments;
pub mod metrics;
pub mod synthetic;

pub use dataset::{export_jsonl, ingest_jsonl, ingest_reader, MotionDataset, Sequence, Split};
pub use experiments::{
    calibration_scores, evaluate_predictor, gaussian_oracle_samples, noisy_oracle_samples,
    prediction_samples, run_table2_experiment, run_table3_experiment, table2_from_samples,
    training_windows, PredictionSample, Table2Report, Table3Config, Table3Row,
};
pub use metrics::{
    mpjpe, mpjpe_horizon_frames, write_csv, HorizonValue, MetricReport, MpjpeMode,
    MPJPE_HORIZONS_MS,
};
pub use synthetic::{
    default_rig, generate_synthetic, stereo_observations, SyntheticKind, SyntheticParams,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("length mismatch: {what}")]
    LengthMismatch { what: String },
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("sequence {sequence}: frame spacing changes at line {line}")]
    NonUniformFrameRate { sequence: String, line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Ood(#[from] OodError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
