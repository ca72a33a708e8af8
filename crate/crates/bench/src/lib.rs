//! Fixtures shared by the benchmarks.

use confmotion::geometry::{CameraModel, Detection2D, StereoObservation};
use confmotion::harness::default_rig;
use confmotion::ood::{calibrate_threshold, ConstantScorer, PrecomputedScorer};
use confmotion::pipeline::{PipelineConfig, PipelineContext};
use confmotion::predict::{LastFrame, PredictorConfig};
use confmotion::ConformalCalibration;
use nalgebra::{Matrix2, Vector3};

pub fn rig() -> (CameraModel, CameraModel) {
    default_rig()
}

pub fn points(joints: usize) -> Vec<Vector3<f64>> {
    (0..joints)
        .map(|j| Vector3::new(-0.3 + 0.05 * j as f64, 0.02 * j as f64, 3.0))
        .collect()
}

pub fn frame(
    points: &[Vector3<f64>],
    t: f64,
    cams: &(CameraModel, CameraModel),
) -> StereoObservation {
    let cov = Matrix2::identity() * 0.25;
    let detect = |cam: &CameraModel| {
        points
            .iter()
            .enumerate()
            .map(|(j, p)| Detection2D::new(j, cam.project(p).expect("point in front of rig"), cov))
            .collect::<Vec<_>>()
    };
    let mut obs = StereoObservation::new(t, detect(&cams.0), detect(&cams.1));
    obs.ood_score = Some(0.0);
    obs
}

/// Last-frame pipeline with fixed quantiles and never-firing OOD stages.
pub fn pipeline(joints: usize) -> PipelineContext {
    let cfg = PipelineConfig::default();
    let tau = calibrate_threshold(&[0.0; 100], cfg.epsilon_ood).expect("valid threshold");
    let calibration = ConformalCalibration {
        epsilon: cfg.epsilon,
        n_cal: 100,
        alpha: vec![vec![3.0; joints]; cfg.k_p],
    };
    let (c1, c2) = rig();
    PipelineContext::builder(cfg.clone(), c1, c2)
        .predictor(
            LastFrame::new(PredictorConfig::new(cfg.k_i, cfg.k_p, joints))
                .expect("valid predictor"),
        )
        .pose_scorer(PrecomputedScorer)
        .motion_scorer(ConstantScorer(0.0))
        .calibration(calibration)
        .thresholds(tau, tau)
        .build()
        .expect("complete pipeline")
}
