#![allow(dead_code)]

pub mod markov;

use confmotion::geometry::{CameraModel, Detection2D, StereoObservation};
use confmotion::harness::default_rig;
use confmotion::ood::{calibrate_threshold, ConstantScorer, PrecomputedScorer};
use confmotion::pipeline::{PipelineConfig, PipelineContext};
use confmotion::predict::{LastFrame, PredictorConfig};
use confmotion::ConformalCalibration;
use nalgebra::{Matrix2, Vector3};

pub fn static_points(joints: usize) -> Vec<Vector3<f64>> {
    (0..joints)
        .map(|j| {
            Vector3::new(
                -0.2 + 0.1 * j as f64,
                0.1 * (j % 3) as f64,
                3.0 + 0.05 * j as f64,
            )
        })
        .collect()
}

/// Noise-free stereo frame of `points`; `flagged` frames carry OOD score 1.
pub fn frame(
    points: &[Vector3<f64>],
    t: f64,
    flagged: bool,
    cams: &(CameraModel, CameraModel),
) -> StereoObservation {
    let cov = Matrix2::identity() * 0.25;
    let d = |cam: &CameraModel| {
        points
            .iter()
            .enumerate()
            .map(|(j, p)| Detection2D::new(j, cam.project(p).unwrap(), cov))
            .collect::<Vec<_>>()
    };
    let mut obs = StereoObservation::new(t, d(&cams.0), d(&cams.1));
    obs.ood_score = Some(if flagged { 1.0 } else { 0.0 });
    obs
}

/// Last-frame pipeline whose 2D stage trusts the attached scores (τ = 0)
/// and whose motion stage never flags.
pub fn trace_context(k_i: usize, k_p: usize, n_req: usize, joints: usize) -> PipelineContext {
    let cfg = PipelineConfig {
        k_i,
        k_p,
        n_req,
        ..PipelineConfig::default()
    };
    let zeros = vec![0.0; 100];
    let tau = calibrate_threshold(&zeros, cfg.epsilon_ood).unwrap();
    let calibration = ConformalCalibration {
        epsilon: cfg.epsilon,
        n_cal: 100,
        alpha: vec![vec![3.0; joints]; k_p],
    };
    let (c1, c2) = default_rig();
    PipelineContext::builder(cfg, c1, c2)
        .predictor(LastFrame::new(PredictorConfig::new(k_i, k_p, joints)).unwrap())
        .pose_scorer(PrecomputedScorer)
        .motion_scorer(ConstantScorer(0.0))
        .calibration(calibration)
        .thresholds(tau, tau)
        .build()
        .unwrap()
}
