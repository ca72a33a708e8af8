use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use confmotion::conformal::calibrate as calibrate_table;
use confmotion::geometry::{
    load_camera_pair, propagate_covariance, triangulate, CameraModel, Pose, PoseCovariances,
    StereoObservation,
};
use confmotion::harness::{
    calibration_scores, default_rig, evaluate_predictor, export_jsonl, generate_synthetic,
    ingest_jsonl, prediction_samples, run_table2_experiment, run_table3_experiment,
    stereo_observations, training_windows, write_csv, MetricReport, MotionDataset, MpjpeMode,
    Split, SyntheticKind, SyntheticParams, Table3Config,
};
use confmotion::ood::{
    calibrate_threshold, motion_features, ConstantScorer, FeatureMahalanobis, GaussianReference,
    MotionMahalanobis, MotionOodScorer, OodThreshold, PoseOodScorer, PrecomputedScorer,
};
use confmotion::pipeline::{CalibrationBundle, PipelineContext};
use confmotion::predict::{
    ConstantVelocity, LastFrame, MotionHistory, MotionPredictor, PredictorConfig, PredictorKind,
    RidgeDct, RidgeDctModel,
};
use confmotion::ConformalCalibration;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{MotionScorerKind, PoseScorerKind, RunConfig};

/// Ridge added to fitted reference covariances.
const REFERENCE_RIDGE: f64 = 1e-9;

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            serde_json::to_writer_pretty(&mut w, value)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, value)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// One JSON value per non-blank line.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn write_reports(reports: &[MetricReport], json: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    if let Some(p) = csv {
        let mut w = create(p)?;
        write_csv(reports, &mut w)?;
        w.flush()?;
    }
    write_json(&reports, json)
}

fn cameras(cfg: &RunConfig) -> Result<(CameraModel, CameraModel)> {
    match &cfg.cameras {
        Some(p) => Ok(load_camera_pair(open(p)?)?),
        None => Ok(default_rig()),
    }
}

fn predictor(cfg: &RunConfig, joints: usize) -> Result<Box<dyn MotionPredictor>> {
    let pc = PredictorConfig {
        sigma_v: cfg.sigma_v,
        ..PredictorConfig::new(cfg.pipeline.k_i, cfg.pipeline.k_p, joints)
    };
    Ok(match cfg.predictor {
        PredictorKind::LastFrame => Box::new(LastFrame::new(pc)?),
        PredictorKind::ConstantVelocity => Box::new(ConstantVelocity::new(pc)?),
        PredictorKind::RidgeDct => {
            let path = cfg
                .model
                .as_ref()
                .ok_or_else(|| anyhow!("predictor ridge_dct needs `model`"))?;
            let model = RidgeDctModel::load(open(path)?, &pc)
                .with_context(|| format!("loading model {}", path.display()))?;
            Box::new(RidgeDct::from_model(model))
        }
    })
}

fn dataset(path: &Path, split: Split, cfg: &RunConfig) -> Result<MotionDataset> {
    let mut data =
        ingest_jsonl(path, split).with_context(|| format!("reading {}", path.display()))?;
    if data.frame_rate == 0.0 {
        data.frame_rate = cfg.pipeline.f_cam;
    }
    if (data.frame_rate - cfg.pipeline.f_cam).abs() > 1e-6 * cfg.pipeline.f_cam {
        bail!(
            "{} is sampled at {} Hz, configuration says f_cam = {}",
            path.display(),
            data.frame_rate,
            cfg.pipeline.f_cam
        );
    }
    Ok(data)
}

fn joints_of(data: &MotionDataset) -> Result<usize> {
    data.sequences
        .first()
        .map(|s| s.joints())
        .ok_or_else(|| anyhow!("dataset is empty"))
}

pub struct SimulateArgs {
    pub kind: SyntheticKind,
    pub params: SyntheticParams,
    pub seed: u64,
    pub output: PathBuf,
    pub observations: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    pub pixel_sigma: f64,
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let data = generate_synthetic(a.kind, &a.params, a.seed)?;
    let mut w = create(&a.output)?;
    export_jsonl(&data, &mut w)?;
    w.flush()?;
    let rig = default_rig();
    if let Some(p) = &a.cameras {
        write_json(&vec![&rig.0, &rig.1], Some(p))?;
    }
    if let Some(p) = &a.observations {
        // Sequences are laid end to end on one clock, separated by a frame
        // with no human so that no history spans two sequences.
        let dt = 1.0 / data.frame_rate;
        let mut w = create(p)?;
        let mut offset = 0.0;
        for (i, seq) in data.sequences.iter().enumerate() {
            let seed = a.seed.wrapping_add(1 + i as u64);
            let obs = stereo_observations(seq, &rig.0, &rig.1, a.pixel_sigma, seed)?;
            if i > 0 {
                let mut gap = StereoObservation::new(offset, Vec::new(), Vec::new());
                gap.missing = true;
                serde_json::to_writer(&mut w, &gap)?;
                writeln!(w)?;
                offset += dt;
            }
            let start = obs.first().map_or(0.0, |o| o.timestamp);
            for mut o in obs {
                o.timestamp += offset - start;
                serde_json::to_writer(&mut w, &o)?;
                writeln!(w)?;
            }
            offset += seq.len() as f64 * dt;
        }
        w.flush()?;
    }
    Ok(())
}

pub struct FitArgs {
    pub data: PathBuf,
    pub config: RunConfig,
    pub dct_cutoff: Option<usize>,
    pub ridge_mu: Option<f64>,
    pub stride: usize,
    pub output: PathBuf,
}

pub fn fit(a: FitArgs) -> Result<()> {
    let cfg = &a.config;
    let data = dataset(&a.data, Split::Train, cfg)?;
    let mut pc = PredictorConfig::new(cfg.pipeline.k_i, cfg.pipeline.k_p, joints_of(&data)?);
    pc.sigma_v = cfg.sigma_v;
    if let Some(c) = a.dct_cutoff {
        pc.dct_cutoff = c;
    }
    if let Some(mu) = a.ridge_mu {
        pc.ridge_mu = mu;
    }
    let windows = training_windows(&data, pc.k_i, pc.k_p, cfg.default_sigma, a.stride)?;
    let mut model = RidgeDct::new(pc)?;
    let fitted = model.fit(&windows)?;
    let mut w = create(&a.output)?;
    fitted.save(&mut w)?;
    w.flush()?;
    eprintln!("fitted ridge-DCT model on {} windows", windows.len());
    Ok(())
}

pub struct CalibrateArgs {
    pub config: RunConfig,
    pub scores: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub stride: usize,
    pub write_scores: Option<PathBuf>,
    pub output: PathBuf,
}

/// Splits `items` into alternating halves: one fits a reference, the other
/// calibrates the threshold on fresh scores.
fn fit_and_threshold(features: &[Vec<f64>], eps: f64) -> Result<(GaussianReference, OodThreshold)> {
    let fit: Vec<Vec<f64>> = features.iter().step_by(2).cloned().collect();
    let held: Vec<&Vec<f64>> = features.iter().skip(1).step_by(2).collect();
    let reference = GaussianReference::fit(&fit, REFERENCE_RIDGE)?;
    let scores = held
        .iter()
        .map(|f| reference.distance(f))
        .collect::<Result<Vec<_>, _>>()?;
    let tau = calibrate_threshold(&scores, eps)?;
    Ok((reference, tau))
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let cfg = &a.config;
    let eps_ood = cfg.pipeline.epsilon_ood;
    let data = a
        .data
        .as_deref()
        .map(|p| dataset(p, Split::Cal, cfg))
        .transpose()?;

    let scores: Vec<Vec<Vec<f64>>> = match (&a.scores, &data) {
        (Some(p), _) => {
            let rows: Vec<Vec<Vec<f64>>> = read_jsonl(p)?;
            transpose_scores(&rows)?
        }
        (None, Some(data)) => {
            let pred = predictor(cfg, joints_of(data)?)?;
            let samples = prediction_samples(data, pred.as_ref(), cfg.default_sigma, a.stride)?;
            calibration_scores(&samples)?
        }
        (None, None) => bail!("calibrate needs --scores or --data"),
    };
    if let Some(p) = &a.write_scores {
        let mut w = create(p)?;
        for row in untranspose_scores(&scores) {
            serde_json::to_writer(&mut w, &row)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    let mut bundle = CalibrationBundle::new(calibrate_table(&scores, cfg.pipeline.epsilon)?);

    let obs: Option<Vec<StereoObservation>> =
        a.observations.as_deref().map(read_jsonl).transpose()?;

    if cfg.motion_scorer == MotionScorerKind::Mahalanobis {
        // Prefer histories triangulated from observations: that is what the
        // scorer sees at run time.
        let histories = match (&obs, &data) {
            (Some(obs), _) => observed_histories(obs, cfg, a.stride)?,
            (None, Some(data)) => {
                training_windows(data, cfg.pipeline.k_i, 1, cfg.default_sigma, a.stride)?
                    .into_iter()
                    .map(|(h, _)| h)
                    .collect()
            }
            (None, None) => bail!("the motion scorer needs --observations or --data"),
        };
        let features: Vec<Vec<f64>> = histories.iter().map(motion_features).collect();
        let (reference, tau) = fit_and_threshold(&features, eps_ood)?;
        bundle.motion_reference = Some(reference);
        bundle.tau_mot = Some(tau);
    }

    if let Some(obs) = &obs {
        let obs: Vec<&StereoObservation> = obs.iter().filter(|o| !o.missing).collect();
        match cfg.pose_scorer {
            PoseScorerKind::Precomputed => {
                let s = obs
                    .iter()
                    .map(|o| {
                        o.ood_score.ok_or_else(|| {
                            anyhow!("observation at t = {} has no ood_score", o.timestamp)
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                bundle.tau_2d = Some(calibrate_threshold(&s, eps_ood)?);
            }
            PoseScorerKind::FeatureMahalanobis => {
                let features: Vec<Vec<f64>> = obs.iter().map(|o| o.features.clone()).collect();
                let (reference, tau) = fit_and_threshold(&features, eps_ood)?;
                bundle.tau_2d = Some(if cfg.pipeline.score_both_cameras {
                    // rescore the held-out half with the max over both cameras
                    let scorer = FeatureMahalanobis {
                        reference: reference.clone(),
                        both_cameras: true,
                    };
                    let s = obs
                        .iter()
                        .skip(1)
                        .step_by(2)
                        .map(|o| scorer.score(o).map(|s| s.value))
                        .collect::<Result<Vec<_>, _>>()?;
                    calibrate_threshold(&s, eps_ood)?
                } else {
                    tau
                });
                bundle.pose_reference = Some(reference);
            }
            PoseScorerKind::Constant => {}
        }
    }
    write_json(&bundle, Some(&a.output))
}

/// `K_I`-frame histories of consecutive observations that triangulate.
fn observed_histories(
    obs: &[StereoObservation],
    cfg: &RunConfig,
    stride: usize,
) -> Result<Vec<MotionHistory>> {
    let (c1, c2) = cameras(cfg)?;
    let k_i = cfg.pipeline.k_i;
    let mut runs: Vec<Vec<(Pose, PoseCovariances)>> = vec![Vec::new()];
    for o in obs {
        let measured = if o.missing {
            None
        } else {
            triangulate(o, &c1, &c2).ok().and_then(|p| {
                propagate_covariance(o, &c1, &c2, &p, cfg.pipeline.sigma_iso)
                    .ok()
                    .map(|c| (p, c))
            })
        };
        match measured {
            Some(m) => runs.last_mut().expect("never empty").push(m),
            None => runs.push(Vec::new()),
        }
    }
    let mut out = Vec::new();
    for run in runs.iter().filter(|r| r.len() >= k_i) {
        for start in (0..=run.len() - k_i).step_by(stride.max(1)) {
            let (poses, covs) = run[start..start + k_i].iter().cloned().unzip();
            out.push(MotionHistory::new_unchecked_spacing(
                poses,
                covs,
                cfg.pipeline.f_cam,
            )?);
        }
    }
    Ok(out)
}

/// Per-sample `[k][j]` rows into per-cell `[k][j][sample]` lists.
fn transpose_scores(rows: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<Vec<f64>>>> {
    let first = rows.first().ok_or_else(|| anyhow!("score file is empty"))?;
    let (k_p, joints) = (first.len(), first.first().map_or(0, Vec::len));
    let mut cells = vec![vec![Vec::with_capacity(rows.len()); joints]; k_p];
    for (i, row) in rows.iter().enumerate() {
        if row.len() != k_p || row.iter().any(|r| r.len() != joints) {
            bail!("score row {} is not {k_p} × {joints}", i + 1);
        }
        for (k, r) in row.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                cells[k][j].push(*v);
            }
        }
    }
    Ok(cells)
}

fn untranspose_scores(cells: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let n = cells.first().and_then(|r| r.first()).map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            cells
                .iter()
                .map(|r| r.iter().map(|c| c[i]).collect())
                .collect()
        })
        .collect()
}

pub fn build_context(cfg: &RunConfig) -> Result<PipelineContext> {
    let path = cfg
        .calibration
        .as_ref()
        .ok_or_else(|| anyhow!("configuration has no `calibration` document"))?;
    let bundle: CalibrationBundle = read_json(path)?;
    let joints = bundle.conformal.joints();
    let (c1, c2) = cameras(cfg)?;

    let pose: Box<dyn PoseOodScorer> = match cfg.pose_scorer {
        PoseScorerKind::Precomputed => Box::new(PrecomputedScorer),
        PoseScorerKind::Constant => Box::new(ConstantScorer(0.0)),
        PoseScorerKind::FeatureMahalanobis => Box::new(FeatureMahalanobis {
            reference: bundle
                .pose_reference
                .clone()
                .ok_or_else(|| anyhow!("calibration has no pose reference"))?,
            both_cameras: cfg.pipeline.score_both_cameras,
        }),
    };
    let motion: Box<dyn MotionOodScorer> = match cfg.motion_scorer {
        MotionScorerKind::Constant => Box::new(ConstantScorer(0.0)),
        MotionScorerKind::Mahalanobis => Box::new(MotionMahalanobis {
            reference: bundle
                .motion_reference
                .clone()
                .ok_or_else(|| anyhow!("calibration has no motion reference"))?,
        }),
    };
    let tau_2d = match (cfg.pose_scorer, bundle.tau_2d) {
        (_, Some(t)) => t,
        (PoseScorerKind::Constant, None) => OodThreshold::permissive(),
        (_, None) => bail!("calibration has no 2D OOD threshold; calibrate with --observations"),
    };
    let tau_mot = match (cfg.motion_scorer, bundle.tau_mot) {
        (_, Some(t)) => t,
        (MotionScorerKind::Constant, None) => OodThreshold::permissive(),
        (_, None) => bail!("calibration has no motion OOD threshold; calibrate with --data"),
    };
    Ok(PipelineContext::builder(cfg.pipeline.clone(), c1, c2)
        .boxed_predictor(predictor(cfg, joints)?)
        .boxed_pose_scorer(pose)
        .boxed_motion_scorer(motion)
        .calibration(bundle.conformal)
        .thresholds(tau_2d, tau_mot)
        .build()?)
}

pub fn run(cfg: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    let ctx = build_context(cfg)?;
    let mut state = ctx.new_state();
    let mut w = create(output)?;
    for (i, line) in open(input)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{} line {}", input.display(), i + 1);
        let obs: StereoObservation = serde_json::from_str(&line).with_context(at)?;
        let out = ctx.step(&mut state, &obs).with_context(at)?;
        serde_json::to_writer(&mut w, &out)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub struct EvaluateArgs {
    pub config: RunConfig,
    pub data: PathBuf,
    pub mode: MpjpeMode,
    pub json: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = &a.config;
    let data = dataset(&a.data, Split::Test, cfg)?;
    let pred = predictor(cfg, joints_of(&data)?)?;
    let calibration = cfg
        .calibration
        .as_deref()
        .map(read_json::<ConformalCalibration>)
        .transpose()?;
    let mut report = evaluate_predictor(
        &data,
        pred.as_ref(),
        calibration.as_ref(),
        cfg.default_sigma,
        a.mode,
    )?;
    report.method = predictor_name(cfg.predictor).into();
    write_reports(&[report], a.json.as_deref(), a.csv.as_deref())
}

fn predictor_name(kind: PredictorKind) -> &'static str {
    match kind {
        PredictorKind::LastFrame => "last_frame",
        PredictorKind::ConstantVelocity => "constant_velocity",
        PredictorKind::RidgeDct => "ridge_dct",
    }
}

pub struct Table2Args {
    pub config: RunConfig,
    pub cal: PathBuf,
    pub test: PathBuf,
    pub json: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

pub fn table2(a: Table2Args) -> Result<()> {
    let cfg = &a.config;
    let cal = dataset(&a.cal, Split::Cal, cfg)?;
    let test = dataset(&a.test, Split::Test, cfg)?;
    let pred = predictor(cfg, joints_of(&cal)?)?;
    let report = run_table2_experiment(
        &cal,
        &test,
        pred.as_ref(),
        cfg.pipeline.epsilon,
        cfg.pipeline.v_max,
        cfg.default_sigma,
    )?;
    write_reports(
        &[report.conformal, report.iso],
        a.json.as_deref(),
        a.csv.as_deref(),
    )
}

pub struct Table3Args {
    pub params: Option<PathBuf>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub ood_probability: Option<f64>,
    pub n_req: Vec<usize>,
    pub json: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

pub fn table3(a: Table3Args) -> Result<()> {
    let mut cfg: Table3Config = read_toml(a.params.as_deref())?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.ood_probability {
        cfg.ood_probability = p;
    }
    if !a.n_req.is_empty() {
        cfg.n_req = a.n_req;
    }
    let reports: Vec<MetricReport> = run_table3_experiment(&cfg)?
        .into_iter()
        .map(|r| r.report)
        .collect();
    write_reports(&reports, a.json.as_deref(), a.csv.as_deref())
}

pub fn synthetic_params(path: Option<&Path>) -> Result<SyntheticParams> {
    read_toml(path)
}
