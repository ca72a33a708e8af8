//! The streaming pose pipeline.
//!
//! Per frame: triangulate and propagate covariances, score the frame for
//! OOD, append either the measured pose (validity 1) or the motion buffer's
//! first slot (validity 0) to the pose buffer, and once the buffer holds
//! `K_I` poses run the predictor. A new prediction replaces the motion buffer
//! only if the history is in distribution and the last `N_req` validity flags
//! are all 1; otherwise the motion buffer shifts left by one slot. Sphere
//! sets are then built from the valid motion-buffer slots and published.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{self, ConformalCalibration, ConformalError, SphereSet};
use crate::geometry::{self, CameraModel, GeometryError, Pose, PoseCovariances, StereoObservation};
use crate::ood::{
    is_ood, GaussianReference, MotionOodScorer, OodError, OodThreshold, PoseOodScorer,
};
use crate::predict::{MotionHistory, MotionPrediction, MotionPredictor, PredictError};

mod config;

pub use config::PipelineConfig;

/// Default number of simulated steps for the Monte-Carlo invalid fraction.
pub const MONTE_CARLO_STEPS: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline is not calibrated: {0}")]
    NotCalibrated(String),
    #[error("motion predictor is not fitted: {0}")]
    NotFitted(String),
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Ood(#[from] OodError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Conformal table plus OOD thresholds and reference statistics, as stored
/// in the calibration JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBundle {
    #[serde(flatten)]
    pub conformal: ConformalCalibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_2d: Option<OodThreshold>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_mot: Option<OodThreshold>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_reference: Option<GaussianReference>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_reference: Option<GaussianReference>,
}

impl CalibrationBundle {
    pub fn new(conformal: ConformalCalibration) -> Self {
        Self {
            conformal,
            tau_2d: None,
            tau_mot: None,
            pose_reference: None,
            motion_reference: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    /// Pose buffer not yet full.
    WarmingUp,
    /// A fresh prediction was accepted.
    Nominal,
    /// OOD frame with no prediction to substitute.
    PoseOod,
    /// Recent poses are valid but the motion history scored OOD.
    MotionOod,
    /// Fewer than `N_req` of the most recent poses came from images.
    AwaitingRecovery,
}

/// Sphere as published downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedSphere {
    #[serde(flatten)]
    pub sphere: SphereSet,
    pub valid: bool,
}

/// Occupancy of one motion-buffer slot; invalid slots publish no spheres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotOccupancy {
    pub slot: usize,
    pub valid: bool,
    /// 1-based horizon step of the prediction this slot came from.
    pub horizon: usize,
    pub time: Option<f64>,
    pub padding: f64,
    pub spheres: Vec<PublishedSphere>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub s_2d: Option<f64>,
    pub s_mot: Option<f64>,
    pub pose_in_distribution: bool,
    /// Validity flag appended for this frame (`None` when the frame was discarded).
    pub validity: Option<bool>,
    /// Sum of the last `N_req` validity flags.
    pub recent_valid: usize,
    pub accepted: bool,
    pub frame_discarded: bool,
    pub nonfinite_prediction: bool,
    pub degraded_joints: Vec<usize>,
    pub buffer_len: usize,
    pub valid_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub step: u64,
    pub timestamp: f64,
    pub status: StepStatus,
    /// Empty before the pose buffer first fills.
    pub occupancies: Vec<SlotOccupancy>,
    pub diagnostics: Diagnostics,
}

/// Pose buffer `H`, validity flags `v` and motion buffer `M`.
///
/// `H` is kept in the layout predictors consume, oldest pose first, so a
/// full buffer is handed to the predictor and motion scorer without copying.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    pose_buffer: MotionHistory,
    validity: VecDeque<bool>,
    motion: MotionPrediction,
    step_count: u64,
}

impl PipelineState {
    pub fn new(k_p: usize, joints: usize, frame_rate: f64) -> Self {
        Self {
            pose_buffer: MotionHistory {
                poses: Vec::new(),
                covs: Vec::new(),
                frame_rate,
            },
            validity: VecDeque::new(),
            motion: MotionPrediction::invalid(k_p, joints),
            step_count: 0,
        }
    }

    pub fn pose_buffer(&self) -> &MotionHistory {
        &self.pose_buffer
    }

    pub fn validity(&self) -> &VecDeque<bool> {
        &self.validity
    }

    pub fn motion_buffer(&self) -> &MotionPrediction {
        &self.motion
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn push(&mut self, entry: (Pose, PoseCovariances), valid: bool, cap: usize) {
        let h = &mut self.pose_buffer;
        if h.poses.len() >= cap {
            let excess = h.poses.len() + 1 - cap;
            h.poses.drain(..excess);
            h.covs.drain(..excess);
        }
        h.poses.push(entry.0);
        h.covs.push(entry.1);
        self.validity.push_back(valid);
        while self.validity.len() > cap {
            self.validity.pop_front();
        }
    }

    fn recent_valid(&self, n_req: usize) -> usize {
        self.validity
            .iter()
            .rev()
            .take(n_req)
            .filter(|v| **v)
            .count()
    }
}

/// Everything immutable a pipeline needs: configuration, cameras, models,
/// and calibrations. Shareable across threads; each stream owns its own
/// [`PipelineState`].
pub struct PipelineContext {
    cfg: PipelineConfig,
    cam1: CameraModel,
    cam2: CameraModel,
    predictor: Box<dyn MotionPredictor>,
    pose_scorer: Box<dyn PoseOodScorer>,
    motion_scorer: Box<dyn MotionOodScorer>,
    calibration: ConformalCalibration,
    tau_2d: OodThreshold,
    tau_mot: OodThreshold,
}

pub struct PipelineBuilder {
    cfg: PipelineConfig,
    cam1: CameraModel,
    cam2: CameraModel,
    predictor: Option<Box<dyn MotionPredictor>>,
    pose_scorer: Option<Box<dyn PoseOodScorer>>,
    motion_scorer: Option<Box<dyn MotionOodScorer>>,
    calibration: Option<ConformalCalibration>,
    tau_2d: Option<OodThreshold>,
    tau_mot: Option<OodThreshold>,
}

impl PipelineBuilder {
    pub fn predictor(mut self, p: impl MotionPredictor + 'static) -> Self {
        self.predictor = Some(Box::new(p));
        self
    }

    pub fn boxed_predictor(mut self, p: Box<dyn MotionPredictor>) -> Self {
        self.predictor = Some(p);
        self
    }

    pub fn pose_scorer(mut self, s: impl PoseOodScorer + 'static) -> Self {
        self.pose_scorer = Some(Box::new(s));
        self
    }

    pub fn boxed_pose_scorer(mut self, s: Box<dyn PoseOodScorer>) -> Self {
        self.pose_scorer = Some(s);
        self
    }

    pub fn motion_scorer(mut self, s: impl MotionOodScorer + 'static) -> Self {
        self.motion_scorer = Some(Box::new(s));
        self
    }

    pub fn boxed_motion_scorer(mut self, s: Box<dyn MotionOodScorer>) -> Self {
        self.motion_scorer = Some(s);
        self
    }

    pub fn calibration(mut self, c: ConformalCalibration) -> Self {
        self.calibration = Some(c);
        self
    }

    pub fn thresholds(mut self, tau_2d: OodThreshold, tau_mot: OodThreshold) -> Self {
        self.tau_2d = Some(tau_2d);
        self.tau_mot = Some(tau_mot);
        self
    }

    pub fn build(self) -> Result<PipelineContext> {
        self.cfg.validate()?;
        let predictor = self
            .predictor
            .ok_or_else(|| PipelineError::NotFitted("no motion predictor supplied".into()))?;
        if !predictor.is_ready() {
            return Err(PipelineError::NotFitted(
                "motion predictor has no fitted model".into(),
            ));
        }
        if predictor.history_len() != self.cfg.k_i || predictor.horizon() != self.cfg.k_p {
            return Err(PipelineError::InvalidConfig(format!(
                "predictor uses K_I = {}, K_P = {}; pipeline uses K_I = {}, K_P = {}",
                predictor.history_len(),
                predictor.horizon(),
                self.cfg.k_i,
                self.cfg.k_p
            )));
        }
        let calibration = self.calibration.ok_or_else(|| {
            PipelineError::NotCalibrated("no conformal calibration supplied".into())
        })?;
        calibration.validate()?;
        if calibration.horizon() != self.cfg.k_p {
            return Err(PipelineError::NotCalibrated(format!(
                "calibration covers {} horizon steps, K_P = {}",
                calibration.horizon(),
                self.cfg.k_p
            )));
        }
        if (calibration.epsilon - self.cfg.epsilon).abs() > 1e-12 {
            return Err(PipelineError::NotCalibrated(format!(
                "calibration was built for epsilon = {}, configuration asks for {}",
                calibration.epsilon, self.cfg.epsilon
            )));
        }
        let tau_2d = self
            .tau_2d
            .ok_or_else(|| PipelineError::NotCalibrated("no 2D OOD threshold".into()))?;
        let tau_mot = self
            .tau_mot
            .ok_or_else(|| PipelineError::NotCalibrated("no motion OOD threshold".into()))?;
        Ok(PipelineContext {
            cfg: self.cfg,
            cam1: self.cam1,
            cam2: self.cam2,
            predictor,
            pose_scorer: self
                .pose_scorer
                .ok_or_else(|| PipelineError::NotCalibrated("no 2D OOD scorer".into()))?,
            motion_scorer: self
                .motion_scorer
                .ok_or_else(|| PipelineError::NotCalibrated("no motion OOD scorer".into()))?,
            calibration,
            tau_2d,
            tau_mot,
        })
    }
}

struct Measurement {
    pose: Pose,
    covs: PoseCovariances,
    degraded: Vec<usize>,
}

impl PipelineContext {
    pub fn builder(cfg: PipelineConfig, cam1: CameraModel, cam2: CameraModel) -> PipelineBuilder {
        PipelineBuilder {
            cfg,
            cam1,
            cam2,
            predictor: None,
            pose_scorer: None,
            motion_scorer: None,
            calibration: None,
            tau_2d: None,
            tau_mot: None,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn joints(&self) -> usize {
        self.calibration.joints()
    }

    pub fn calibration(&self) -> &ConformalCalibration {
        &self.calibration
    }

    pub fn new_state(&self) -> PipelineState {
        PipelineState::new(self.cfg.k_p, self.joints(), self.cfg.f_cam)
    }

    /// Triangulated pose and covariances. Joints whose rays are degenerate
    /// keep their best available position (motion buffer slot 0, then the
    /// newest buffered pose) with an inflated isotropic covariance; `None`
    /// if no such position exists.
    fn measure(
        &self,
        obs: &StereoObservation,
        state: &PipelineState,
    ) -> Result<Option<Measurement>> {
        let joints = self.joints();
        if obs.missing {
            return Ok(None);
        }
        if obs.joint_count() != joints {
            return Err(GeometryError::JointCountMismatch {
                what: format!(
                    "observation has {} joints, pipeline {joints}",
                    obs.joint_count()
                ),
            }
            .into());
        }
        let points = geometry::triangulate_joints(obs, &self.cam1, &self.cam2)?;
        let fallback_cov = Matrix3::identity() * self.cfg.sigma_fallback.powi(2);
        let mut pose = Vec::with_capacity(joints);
        let mut covs = Vec::with_capacity(joints);
        let mut degraded = Vec::new();
        for (j, point) in points.into_iter().enumerate() {
            let measured = point.and_then(|p| {
                geometry::joint_covariance(
                    &obs.cam1[j],
                    &obs.cam2[j],
                    obs.cross_cov.as_ref(),
                    &self.cam1,
                    &self.cam2,
                    self.cfg.sigma_iso,
                    j,
                )
                .map(|c| (p, c))
            });
            match measured {
                Ok((p, c)) => {
                    pose.push(p);
                    covs.push(c);
                }
                Err(_) => {
                    let Some(p) = fallback_position(state, j) else {
                        return Ok(None);
                    };
                    pose.push(p);
                    covs.push(fallback_cov);
                    degraded.push(j);
                }
            }
        }
        Ok(Some(Measurement {
            pose: Pose::new(pose, obs.timestamp),
            covs: PoseCovariances::new(covs),
            degraded,
        }))
    }

    /// Processes one stereo frame.
    pub fn step(&self, state: &mut PipelineState, obs: &StereoObservation) -> Result<StepOutput> {
        let cfg = &self.cfg;
        state.step_count += 1;
        let mut diag = Diagnostics::default();

        let measurement = self.measure(obs, state)?;
        let s_2d = self.pose_scorer.score(obs)?;
        diag.s_2d = Some(s_2d.value);
        diag.pose_in_distribution = !is_ood(&s_2d, &self.tau_2d) && measurement.is_some();

        if diag.pose_in_distribution {
            let m = measurement.expect("checked above");
            diag.degraded_joints = m.degraded;
            state.push((m.pose, m.covs), true, cfg.k_i);
            diag.validity = Some(true);
        } else if let Some((p, c)) = state.motion.first() {
            let entry = (p.clone(), c.clone());
            state.push(entry, false, cfg.k_i);
            diag.validity = Some(false);
        } else if state.pose_buffer.len() < cfg.k_i {
            // nothing to substitute before the first prediction: drop the frame
            diag.frame_discarded = true;
            diag.buffer_len = state.pose_buffer.len();
            return Ok(StepOutput {
                step: state.step_count,
                timestamp: obs.timestamp,
                status: StepStatus::PoseOod,
                occupancies: Vec::new(),
                diagnostics: diag,
            });
        } else {
            let j = self.joints();
            state.push(
                (
                    Pose::sentinel(j, obs.timestamp),
                    PoseCovariances::sentinel(j),
                ),
                false,
                cfg.k_i,
            );
            diag.validity = Some(false);
            diag.recent_valid = state.recent_valid(cfg.n_req);
            diag.buffer_len = state.pose_buffer.len();
            state.motion.shift_left();
            return self.publish(state, obs.timestamp, StepStatus::PoseOod, diag);
        }

        diag.recent_valid = state.recent_valid(cfg.n_req);
        diag.buffer_len = state.pose_buffer.len();
        if state.pose_buffer.len() < cfg.k_i {
            return Ok(StepOutput {
                step: state.step_count,
                timestamp: obs.timestamp,
                status: StepStatus::WarmingUp,
                occupancies: Vec::new(),
                diagnostics: diag,
            });
        }

        let history = &state.pose_buffer;
        let s_mot = self.motion_scorer.score(history)?;
        diag.s_mot = Some(s_mot.value);
        let recent_ok = diag.recent_valid == cfg.n_req;
        let motion_ok = !is_ood(&s_mot, &self.tau_mot);

        let status = if recent_ok && motion_ok {
            let prediction = self.predictor.predict(history)?;
            if prediction.is_finite() {
                state.motion = prediction;
                diag.accepted = true;
                StepStatus::Nominal
            } else {
                diag.nonfinite_prediction = true;
                state.motion.shift_left();
                StepStatus::MotionOod
            }
        } else {
            state.motion.shift_left();
            if recent_ok {
                StepStatus::MotionOod
            } else {
                StepStatus::AwaitingRecovery
            }
        };
        self.publish(state, obs.timestamp, status, diag)
    }

    fn publish(
        &self,
        state: &PipelineState,
        timestamp: f64,
        status: StepStatus,
        mut diag: Diagnostics,
    ) -> Result<StepOutput> {
        let m = &state.motion;
        diag.valid_slots = m.valid_count();
        let sets = conformal::prediction_sets(m, &self.calibration)?;
        let occupancies = sets
            .into_iter()
            .enumerate()
            .map(|(slot, spheres)| {
                let horizon = m.horizon_index(slot) + 1;
                match spheres {
                    Some(spheres) => {
                        let occ = conformal::occupancy_union(&spheres, self.cfg.padding)?;
                        Ok(SlotOccupancy {
                            slot,
                            valid: true,
                            horizon,
                            time: Some(occ.time),
                            padding: occ.padding,
                            spheres: occ
                                .spheres
                                .into_iter()
                                .map(|sphere| PublishedSphere {
                                    sphere,
                                    valid: true,
                                })
                                .collect(),
                        })
                    }
                    None => Ok(SlotOccupancy {
                        slot,
                        valid: false,
                        horizon,
                        time: None,
                        padding: self.cfg.padding,
                        spheres: Vec::new(),
                    }),
                }
            })
            .collect::<Result<Vec<_>, ConformalError>>()?;
        Ok(StepOutput {
            step: state.step_count,
            timestamp,
            status,
            occupancies,
            diagnostics: diag,
        })
    }
}

fn fallback_position(state: &PipelineState, joint: usize) -> Option<Vector3<f64>> {
    if let Some((p, _)) = state.motion.first() {
        return Some(p.joints[joint]);
    }
    state
        .pose_buffer
        .poses
        .iter()
        .rev()
        .map(|p| p.joints[joint])
        .find(|p| p.iter().all(|v| v.is_finite()))
}

/// Checks one transition of the state machine; returns a description of
/// the first violated property.
pub fn audit_transition(
    cfg: &PipelineConfig,
    before: &PipelineState,
    after: &PipelineState,
    out: &StepOutput,
) -> std::result::Result<(), String> {
    let m = &after.motion;
    if m.len() != cfg.k_p {
        return Err(format!(
            "motion buffer has {} slots, K_P = {}",
            m.len(),
            cfg.k_p
        ));
    }
    let h = &after.pose_buffer;
    if h.len() > cfg.k_i || h.len() != after.validity.len() || h.poses.len() != h.covs.len() {
        return Err("pose buffer exceeds K_I or disagrees with the validity buffer".into());
    }
    m.check_invariants()?;
    let (was, now) = (before.motion.valid_count(), m.valid_count());
    if out.diagnostics.accepted {
        if now != cfg.k_p {
            return Err("accepted prediction is not fully valid".into());
        }
        let recent = after
            .validity
            .iter()
            .rev()
            .take(cfg.n_req)
            .filter(|v| **v)
            .count();
        if recent != cfg.n_req {
            return Err("prediction accepted without N_req valid poses".into());
        }
    } else {
        if now > was {
            return Err("valid slots increased without an acceptance".into());
        }
        let shifted = was.saturating_sub(1);
        let untouched =
            matches!(out.status, StepStatus::WarmingUp) || out.diagnostics.frame_discarded;
        if !untouched && now != shifted {
            return Err(format!(
                "rejection left {now} valid slots, expected {shifted}"
            ));
        }
        if untouched && now != was {
            return Err("motion buffer changed during warm-up".into());
        }
    }
    for occ in &out.occupancies {
        if occ.valid != m.valid[occ.slot] {
            return Err(format!("slot {} published with wrong validity", occ.slot));
        }
        if !occ.valid && !occ.spheres.is_empty() {
            return Err(format!("invalid slot {} published spheres", occ.slot));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodHandling {
    /// Every OOD frame invalidates the next `K_I` predictions.
    None,
    /// Reuse predictions; accept once the last `n_req` frames were valid.
    Reuse { n_req: usize, steps: u64, seed: u64 },
}

/// Long-run fraction of steps whose pose buffer blocks a fresh prediction
/// when each frame is independently OOD with probability `p`.
///
/// Without OOD handling this is `1 − (1 − p)^K_I`. With reuse it is
/// estimated by simulating the validity flags and the `N_req` gate.
pub fn expected_invalid_fraction(k_i: usize, p: f64, handling: OodHandling) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(PipelineError::InvalidProbability(p));
    }
    match handling {
        OodHandling::None => Ok(1.0 - (1.0 - p).powi(k_i as i32)),
        OodHandling::Reuse { n_req, steps, seed } => {
            if n_req == 0 || n_req > k_i {
                return Err(PipelineError::InvalidConfig(format!(
                    "N_req = {n_req} outside 1..=K_I"
                )));
            }
            if steps == 0 {
                return Err(PipelineError::InvalidConfig(
                    "at least one step is required".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut run = 0usize;
            // fill the buffer before counting, as the pipeline does
            for _ in 0..k_i {
                run = if rng.random::<f64>() < p { 0 } else { run + 1 };
            }
            let mut invalid = 0u64;
            for _ in 0..steps {
                run = if rng.random::<f64>() < p { 0 } else { run + 1 };
                if run < n_req {
                    invalid += 1;
                }
            }
            Ok(invalid as f64 / steps as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_invalid_fraction() {
        let v = expected_invalid_fraction(50, 0.05, OodHandling::None).unwrap();
        assert!((v - 0.9231).abs() < 1e-4);
        assert_eq!(
            expected_invalid_fraction(50, 0.0, OodHandling::None).unwrap(),
            0.0
        );
        assert!(matches!(
            expected_invalid_fraction(50, 1.5, OodHandling::None),
            Err(PipelineError::InvalidProbability(_))
        ));
    }

    #[test]
    fn reuse_fraction_is_seeded() {
        let h = OodHandling::Reuse {
            n_req: 3,
            steps: 20_000,
            seed: 7,
        };
        let a = expected_invalid_fraction(50, 0.05, h).unwrap();
        let b = expected_invalid_fraction(50, 0.05, h).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            expected_invalid_fraction(
                50,
                0.0,
                OodHandling::Reuse {
                    n_req: 3,
                    steps: 1000,
                    seed: 1
                }
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn state_buffer_is_capped() {
        let mut s = PipelineState::new(3, 1, 25.0);
        for i in 0..10 {
            s.push(
                (Pose::sentinel(1, i as f64), PoseCovariances::sentinel(1)),
                i % 2 == 0,
                4,
            );
        }
        assert_eq!(s.pose_buffer().len(), 4);
        assert_eq!(s.validity().len(), 4);
        assert_eq!(s.recent_valid(2), 1);
    }
}
