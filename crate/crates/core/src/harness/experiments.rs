//! Experiment drivers: predictor evaluation, conformal-vs-ISO set
//! comparison, and the streaming OOD-handling study.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::distr::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::MotionDataset;
use super::metrics::{mpjpe, mpjpe_horizon_frames, HorizonValue, MetricReport, MpjpeMode};
use super::synthetic::default_rig;
use super::{HarnessError, Result};
use crate::conformal::{
    self, calibrate, coverage_and_volume, iso_baseline_set, prediction_scores,
    ConformalCalibration, SphereSet,
};
use crate::geometry::{self, CameraModel, Detection2D, Pose, PoseCovariances, StereoObservation};
use crate::ood::{calibrate_threshold, ConstantScorer, PrecomputedScorer};
use crate::pipeline::{PipelineConfig, PipelineContext, StepStatus};
use crate::predict::{
    LastFrame, MotionHistory, MotionPrediction, MotionPredictor, PredictorConfig,
};

/// One prediction with the poses it tries to predict and the last pose the
/// predictor saw.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSample {
    pub prediction: MotionPrediction,
    pub truth: Vec<Pose>,
    pub last_observed: Pose,
}

/// Slides a `K_I + K_P` window over every sequence with the given stride.
/// Histories use the observed poses; sequences without covariances get
/// isotropic ones with standard deviation `default_sigma`.
pub fn prediction_samples(
    dataset: &MotionDataset,
    predictor: &dyn MotionPredictor,
    default_sigma: f64,
    stride: usize,
) -> Result<Vec<PredictionSample>> {
    if stride == 0 {
        return Err(HarnessError::InvalidParams(
            "stride must be positive".into(),
        ));
    }
    let (k_i, k_p) = (predictor.history_len(), predictor.horizon());
    let mut out = Vec::new();
    for seq in &dataset.sequences {
        if seq.len() < k_i + k_p {
            continue;
        }
        for start in (0..=seq.len() - k_i - k_p).step_by(stride) {
            let history = seq.history(start, k_i, default_sigma, dataset.frame_rate)?;
            out.push(PredictionSample {
                prediction: predictor.predict(&history)?,
                truth: seq.reference()[start + k_i..start + k_i + k_p].to_vec(),
                last_observed: seq.poses[start + k_i - 1].clone(),
            });
        }
    }
    Ok(out)
}

/// `(history, future truth)` pairs for fitting a learned predictor.
pub fn training_windows(
    dataset: &MotionDataset,
    k_i: usize,
    k_p: usize,
    default_sigma: f64,
    stride: usize,
) -> Result<Vec<(MotionHistory, Vec<Pose>)>> {
    if stride == 0 {
        return Err(HarnessError::InvalidParams(
            "stride must be positive".into(),
        ));
    }
    let mut out = Vec::new();
    for seq in &dataset.sequences {
        if seq.len() < k_i + k_p {
            continue;
        }
        for start in (0..=seq.len() - k_i - k_p).step_by(stride) {
            out.push((
                seq.history(start, k_i, default_sigma, dataset.frame_rate)?,
                seq.reference()[start + k_i..start + k_i + k_p].to_vec(),
            ));
        }
    }
    Ok(out)
}

/// Per-cell calibration scores, `scores[k][j]`.
pub fn calibration_scores(samples: &[PredictionSample]) -> Result<Vec<Vec<Vec<f64>>>> {
    let first = samples
        .first()
        .ok_or(HarnessError::InvalidParams("no calibration samples".into()))?;
    let (k_p, joints) = (first.prediction.len(), first.prediction.joints());
    let mut cells = vec![vec![Vec::with_capacity(samples.len()); joints]; k_p];
    for s in samples {
        let scores = prediction_scores(&s.prediction, &s.truth)?;
        if scores.len() != k_p || scores.iter().any(|r| r.len() != joints) {
            return Err(HarnessError::LengthMismatch {
                what: "calibration samples differ in shape".into(),
            });
        }
        for (k, row) in scores.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                cells[k][j].push(*v);
            }
        }
    }
    Ok(cells)
}

/// Accumulates sets and truths per horizon.
struct HorizonSets {
    sets: Vec<Vec<SphereSet>>,
    truths: Vec<Vec<Vector3<f64>>>,
}

impl HorizonSets {
    fn new(k_p: usize) -> Self {
        Self {
            sets: vec![Vec::new(); k_p],
            truths: vec![Vec::new(); k_p],
        }
    }

    fn report(&self, method: &str, frame_rate: f64) -> Result<MetricReport> {
        let mut r = MetricReport::new(method);
        let all_sets: Vec<SphereSet> = self.sets.iter().flatten().cloned().collect();
        let all_truths: Vec<Vector3<f64>> = self.truths.iter().flatten().copied().collect();
        let total = coverage_and_volume(&all_sets, &all_truths)?;
        r.coverage = Some(total.coverage);
        r.mean_volume = Some(total.mean_volume);
        for (k, (s, t)) in self.sets.iter().zip(&self.truths).enumerate() {
            let cv = coverage_and_volume(s, t)?;
            let horizon_ms = 1000.0 * (k + 1) as f64 / frame_rate;
            r.coverage_per_horizon.push(HorizonValue {
                horizon_ms,
                value: cv.coverage,
            });
            r.volume_per_horizon.push(HorizonValue {
                horizon_ms,
                value: cv.mean_volume,
            });
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Report {
    pub conformal: MetricReport,
    pub iso: MetricReport,
    pub calibration: ConformalCalibration,
}

/// Calibrates on `cal`, then compares conformal spheres against the
/// constant-velocity ISO baseline on `test`: coverage and mean volume, in
/// total and per horizon step.
pub fn table2_from_samples(
    cal: &[PredictionSample],
    test: &[PredictionSample],
    epsilon: f64,
    v_max: f64,
    frame_rate: f64,
) -> Result<Table2Report> {
    let calibration = calibrate(&calibration_scores(cal)?, epsilon)?;
    let first = test
        .first()
        .ok_or(HarnessError::InvalidParams("no test samples".into()))?;
    let k_p = first.prediction.len();
    let mut conf = HorizonSets::new(k_p);
    let mut iso = HorizonSets::new(k_p);
    for s in test {
        if s.truth.len() != k_p {
            return Err(HarnessError::LengthMismatch {
                what: format!("truth window of {} poses, K_P = {k_p}", s.truth.len()),
            });
        }
        let sets = conformal::prediction_sets(&s.prediction, &calibration)?;
        for (k, (slot, truth)) in sets.iter().zip(&s.truth).enumerate() {
            let Some(slot) = slot else { continue };
            conf.sets[k].extend(slot.iter().cloned());
            conf.truths[k].extend(truth.joints.iter().copied());
            let t = s.prediction.poses[k].timestamp;
            iso.sets[k].extend(iso_baseline_set(&s.last_observed, t, v_max)?);
            iso.truths[k].extend(truth.joints.iter().copied());
        }
    }
    let mut conformal = conf.report("conformal", frame_rate)?;
    let preds: Vec<MotionPrediction> = test.iter().map(|s| s.prediction.clone()).collect();
    let truths: Vec<Vec<Pose>> = test.iter().map(|s| s.truth.clone()).collect();
    conformal.mpjpe_per_horizon = mpjpe(&preds, &truths, frame_rate, MpjpeMode::Global)?;
    Ok(Table2Report {
        conformal,
        iso: iso.report("iso", frame_rate)?,
        calibration,
    })
}

/// Dataset form of [`table2_from_samples`]: windows from the calibration
/// and test splits with stride 1.
pub fn run_table2_experiment(
    cal: &MotionDataset,
    test: &MotionDataset,
    predictor: &dyn MotionPredictor,
    epsilon: f64,
    v_max: f64,
    default_sigma: f64,
) -> Result<Table2Report> {
    let cal_samples = prediction_samples(cal, predictor, default_sigma, 1)?;
    let test_samples = prediction_samples(test, predictor, default_sigma, 1)?;
    table2_from_samples(&cal_samples, &test_samples, epsilon, v_max, test.frame_rate)
}

/// MPJPE of a predictor over a dataset, plus coverage and volume when a
/// calibration is supplied.
pub fn evaluate_predictor(
    dataset: &MotionDataset,
    predictor: &dyn MotionPredictor,
    calibration: Option<&ConformalCalibration>,
    default_sigma: f64,
    mode: MpjpeMode,
) -> Result<MetricReport> {
    let samples = prediction_samples(dataset, predictor, default_sigma, 1)?;
    let preds: Vec<MotionPrediction> = samples.iter().map(|s| s.prediction.clone()).collect();
    let truths: Vec<Vec<Pose>> = samples.iter().map(|s| s.truth.clone()).collect();
    let mut report = match calibration {
        Some(calib) => {
            let mut sets = HorizonSets::new(predictor.horizon());
            for s in &samples {
                for (k, (slot, truth)) in conformal::prediction_sets(&s.prediction, calib)?
                    .into_iter()
                    .zip(&s.truth)
                    .enumerate()
                {
                    if let Some(slot) = slot {
                        sets.sets[k].extend(slot);
                        sets.truths[k].extend(truth.joints.iter().copied());
                    }
                }
            }
            sets.report("predictor", dataset.frame_rate)?
        }
        None => MetricReport::new("predictor"),
    };
    report.mpjpe_per_horizon = mpjpe(&preds, &truths, dataset.frame_rate, mode)?;
    Ok(report)
}

/// Oracle samples for the coverage experiment: a random mean and a random
/// SPD covariance (per-axis standard deviations in `[0.01, 0.1]` m, random
/// orientation) per joint and horizon, with the truth drawn from exactly
/// that Gaussian.
pub fn gaussian_oracle_samples(
    n: usize,
    k_p: usize,
    joints: usize,
    frame_rate: f64,
    seed: u64,
) -> Vec<PredictionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / frame_rate;
    (0..n)
        .map(|_| {
            let last = Pose::new(
                (0..joints)
                    .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                    .collect(),
                0.0,
            );
            let mut poses = Vec::with_capacity(k_p);
            let mut covs = Vec::with_capacity(k_p);
            let mut truth = Vec::with_capacity(k_p);
            for k in 1..=k_p {
                let t = k as f64 * dt;
                let mut means = Vec::with_capacity(joints);
                let mut cs = Vec::with_capacity(joints);
                let mut ts = Vec::with_capacity(joints);
                for mean0 in &last.joints {
                    let q = random_rotation(&mut rng);
                    let s = Vector3::from_fn(|_, _| rng.random_range(0.01..0.1));
                    let l = q * Matrix3::from_diagonal(&s);
                    let c = l * l.transpose();
                    let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                    means.push(*mean0);
                    ts.push(mean0 + l * z);
                    cs.push((c + c.transpose()) * 0.5);
                }
                poses.push(Pose::new(means, t));
                covs.push(PoseCovariances::new(cs));
                truth.push(Pose::new(ts, t));
            }
            PredictionSample {
                prediction: MotionPrediction::from_parts(poses, covs),
                truth,
                last_observed: last,
            }
        })
        .collect()
}

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ));
    q.to_rotation_matrix().into_inner()
}

/// Samples from a predictor whose mean is the truth plus isotropic Gaussian
/// error of standard deviation `sigma` and whose covariance is `sigma²·I`.
/// The last observed pose is the noise-free pose just before the window.
pub fn noisy_oracle_samples(
    dataset: &MotionDataset,
    k_i: usize,
    k_p: usize,
    sigma: f64,
    stride: usize,
    seed: u64,
) -> Result<Vec<PredictionSample>> {
    let noise = Normal::new(0.0, sigma).map_err(|e| HarnessError::InvalidParams(e.to_string()))?;
    if stride == 0 {
        return Err(HarnessError::InvalidParams(
            "stride must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cov = Matrix3::identity() * sigma * sigma;
    let mut out = Vec::new();
    for seq in &dataset.sequences {
        let truth = seq.reference();
        if truth.len() < k_i + k_p {
            continue;
        }
        for start in (0..=truth.len() - k_i - k_p).step_by(stride) {
            let window = &truth[start + k_i..start + k_i + k_p];
            let poses = window
                .iter()
                .map(|p| {
                    let joints = p
                        .joints
                        .iter()
                        .map(|x| x + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
                        .collect();
                    Pose::new(joints, p.timestamp)
                })
                .collect();
            let covs = vec![PoseCovariances::new(vec![cov; seq.joints()]); k_p];
            out.push(PredictionSample {
                prediction: MotionPrediction::from_parts(poses, covs),
                truth: window.to_vec(),
                last_observed: truth[start + k_i - 1].clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Table3Config {
    pub k_i: usize,
    pub k_p: usize,
    pub f_cam: f64,
    /// Stream length per `N_req` value.
    pub steps: u64,
    /// Per-frame probability that the 2D stage flags the frame.
    pub ood_probability: f64,
    pub n_req: Vec<usize>,
    pub joints: usize,
    pub pixel_sigma: f64,
    /// Joint oscillation amplitude (m) and frequency (Hz).
    pub amplitude: f64,
    pub frequency: f64,
    pub epsilon: f64,
    /// Calibration windows for the conformal table.
    pub cal_windows: usize,
    pub seed: u64,
}

impl Default for Table3Config {
    fn default() -> Self {
        Self {
            k_i: 50,
            k_p: 10,
            f_cam: 25.0,
            steps: 100_000,
            ood_probability: 0.05,
            n_req: vec![3, 10, 50],
            joints: 1,
            pixel_sigma: 0.5,
            amplitude: 0.05,
            frequency: 0.2,
            epsilon: 0.01,
            cal_windows: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub n_req: usize,
    /// Steps after the pose buffer first filled.
    pub counted_steps: u64,
    pub report: MetricReport,
}

/// Slowly oscillating joints in front of the default rig; position is a
/// closed-form function of time so any horizon's truth is available.
struct Scene {
    base: Vec<Vector3<f64>>,
    dirs: Vec<Vector3<f64>>,
    phases: Vec<f64>,
    amplitude: f64,
    omega: f64,
}

impl Scene {
    fn new(cfg: &Table3Config, rng: &mut ChaCha8Rng) -> Self {
        let mut unit = || {
            let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            v / v.norm().max(1e-12)
        };
        let dirs = (0..cfg.joints).map(|_| unit()).collect();
        let base = (0..cfg.joints)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(2.5..3.5),
                )
            })
            .collect();
        let phases = (0..cfg.joints)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Self {
            base,
            dirs,
            phases,
            amplitude: cfg.amplitude,
            omega: std::f64::consts::TAU * cfg.frequency,
        }
    }

    fn truth(&self, t: f64) -> Vec<Vector3<f64>> {
        (0..self.base.len())
            .map(|j| {
                self.base[j]
                    + self.dirs[j] * (self.amplitude * (self.omega * t + self.phases[j]).sin())
            })
            .collect()
    }
}

struct Observer {
    cam1: CameraModel,
    cam2: CameraModel,
    noise: Normal<f64>,
    cov: Matrix2<f64>,
    rng: ChaCha8Rng,
}

impl Observer {
    fn observe(&mut self, truth: &[Vector3<f64>], t: f64, flagged: bool) -> StereoObservation {
        let mut d1 = Vec::with_capacity(truth.len());
        let mut d2 = Vec::with_capacity(truth.len());
        for (j, p) in truth.iter().enumerate() {
            let u1 = self.cam1.project(p).unwrap_or_else(Vector2::zeros);
            let u2 = self.cam2.project(p).unwrap_or_else(Vector2::zeros);
            let n = [(); 4].map(|_| self.noise.sample(&mut self.rng));
            d1.push(Detection2D::new(j, u1 + Vector2::new(n[0], n[1]), self.cov));
            d2.push(Detection2D::new(j, u2 + Vector2::new(n[2], n[3]), self.cov));
        }
        let mut obs = StereoObservation::new(t, d1, d2);
        obs.ood_score = Some(if flagged { 1.0 } else { 0.0 });
        obs
    }
}

/// Runs the full pipeline on one seeded stream per `N_req` value (the same
/// stream each time) with a last-frame predictor and 2D OOD events injected
/// with the configured probability. Reports the invalid-buffer rate, the
/// fresh-prediction rate, and MPJPE of every valid published slot at the
/// grid horizons.
pub fn run_table3_experiment(cfg: &Table3Config) -> Result<Vec<Table3Row>> {
    if !(0.0..=1.0).contains(&cfg.ood_probability) {
        return Err(HarnessError::InvalidParams(format!(
            "ood_probability = {} outside [0, 1]",
            cfg.ood_probability
        )));
    }
    let (cam1, cam2) = default_rig();
    let dt = 1.0 / cfg.f_cam;
    let mut scene_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = Scene::new(cfg, &mut scene_rng);
    let noise = Normal::new(0.0, cfg.pixel_sigma)
        .map_err(|e| HarnessError::InvalidParams(e.to_string()))?;
    let observer = |stream: u64| Observer {
        cam1: cam1.clone(),
        cam2: cam2.clone(),
        noise,
        cov: Matrix2::identity() * cfg.pixel_sigma * cfg.pixel_sigma,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ stream),
    };

    let mut pcfg = PipelineConfig {
        k_i: cfg.k_i,
        k_p: cfg.k_p,
        f_cam: cfg.f_cam,
        epsilon: cfg.epsilon,
        ..PipelineConfig::default()
    };
    let predictor = LastFrame::new(PredictorConfig::new(cfg.k_i, cfg.k_p, cfg.joints))?;

    // Conformal table from a separate, OOD-free stretch of the same scene
    // that starts after the evaluated stream ends.
    let calibration = {
        let mut obs_stream = observer(0x0ca1);
        let t0 = (cfg.steps as f64 + 1000.0) * dt;
        let frames = cfg.k_i + cfg.k_p * cfg.cal_windows;
        let mut poses = Vec::with_capacity(frames);
        let mut covs = Vec::with_capacity(frames);
        let mut truths = Vec::with_capacity(frames);
        for i in 0..frames {
            let t = t0 + i as f64 * dt;
            let truth = scene.truth(t);
            let obs = obs_stream.observe(&truth, t, false);
            let pose = geometry::triangulate(&obs, &cam1, &cam2)?;
            covs.push(geometry::propagate_covariance(
                &obs,
                &cam1,
                &cam2,
                &pose,
                pcfg.sigma_iso,
            )?);
            poses.push(pose);
            truths.push(Pose::new(truth, t));
        }
        let mut samples = Vec::with_capacity(cfg.cal_windows);
        for w in 0..cfg.cal_windows {
            let start = w * cfg.k_p;
            let history = MotionHistory::new_unchecked_spacing(
                poses[start..start + cfg.k_i].to_vec(),
                covs[start..start + cfg.k_i].to_vec(),
                cfg.f_cam,
            )?;
            samples.push(PredictionSample {
                prediction: predictor.predict(&history)?,
                truth: truths[start + cfg.k_i..start + cfg.k_i + cfg.k_p].to_vec(),
                last_observed: poses[start + cfg.k_i - 1].clone(),
            });
        }
        calibrate(&calibration_scores(&samples)?, cfg.epsilon)?
    };
    let in_distribution = vec![0.0; 200];
    let tau_2d = calibrate_threshold(&in_distribution, pcfg.epsilon_ood)?;
    let tau_mot = calibrate_threshold(&in_distribution, pcfg.epsilon_ood)?;
    let grid = mpjpe_horizon_frames(cfg.f_cam, cfg.k_p);

    let mut rows = Vec::with_capacity(cfg.n_req.len());
    for &n_req in &cfg.n_req {
        pcfg.n_req = n_req;
        let ctx = PipelineContext::builder(pcfg.clone(), cam1.clone(), cam2.clone())
            .predictor(predictor.clone())
            .pose_scorer(PrecomputedScorer)
            .motion_scorer(ConstantScorer(0.0))
            .calibration(calibration.clone())
            .thresholds(tau_2d, tau_mot)
            .build()?;
        let mut state = ctx.new_state();
        let mut obs_stream = observer(0x57e0);
        let mut ood_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00d0);
        let events = Bernoulli::new(cfg.ood_probability)
            .map_err(|e| HarnessError::InvalidParams(e.to_string()))?;

        let (mut counted, mut invalid, mut accepted) = (0u64, 0u64, 0u64);
        let mut err_sum = vec![0.0; grid.len()];
        let mut err_n = vec![0u64; grid.len()];
        for step in 0..cfg.steps {
            let t = step as f64 * dt;
            let flagged = events.sample(&mut ood_rng);
            let obs = obs_stream.observe(&scene.truth(t), t, flagged);
            let out = ctx.step(&mut state, &obs)?;
            if out.status == StepStatus::WarmingUp || out.diagnostics.buffer_len < cfg.k_i {
                continue;
            }
            counted += 1;
            if out.diagnostics.recent_valid < n_req {
                invalid += 1;
            }
            if out.diagnostics.accepted {
                accepted += 1;
            }
            let m = state.motion_buffer();
            for (g, &(_, k)) in grid.iter().enumerate() {
                if m.valid[k - 1] {
                    let pose = &m.poses[k - 1];
                    let truth = scene.truth(pose.timestamp);
                    let e: f64 = pose
                        .joints
                        .iter()
                        .zip(&truth)
                        .map(|(a, b)| (a - b).norm())
                        .sum();
                    err_sum[g] += e / cfg.joints as f64;
                    err_n[g] += 1;
                }
            }
        }
        let mut report = MetricReport::new(format!("n_req_{n_req}"));
        if counted > 0 {
            report.invalid_h_rate = Some(invalid as f64 / counted as f64);
            report.motion_valid_rate = Some(accepted as f64 / counted as f64);
        }
        report.mpjpe_per_horizon = grid
            .iter()
            .zip(err_sum.iter().zip(&err_n))
            .filter(|(_, (_, n))| **n > 0)
            .map(|(&(ms, _), (s, n))| HorizonValue {
                horizon_ms: ms,
                value: 1000.0 * s / *n as f64,
            })
            .collect();
        rows.push(Table3Row {
            n_req,
            counted_steps: counted,
            report,
        });
    }
    Ok(rows)
}
