use std::io::Write;

use confmotion::geometry::{Pose, PoseCovariances};
use confmotion::harness::{
    evaluate_predictor, export_jsonl, gaussian_oracle_samples, generate_synthetic, ingest_jsonl,
    mpjpe, noisy_oracle_samples, run_table2_experiment, run_table3_experiment, table2_from_samples,
    write_csv, HarnessError, MpjpeMode, Split, SyntheticKind, SyntheticParams, Table3Config,
};
use confmotion::predict::{LastFrame, MotionPrediction, PredictorConfig};
use nalgebra::Vector3;
use proptest::prelude::*;

fn kind(i: u8) -> SyntheticKind {
    [
        SyntheticKind::Static,
        SyntheticKind::Linear,
        SyntheticKind::Sinusoidal,
        SyntheticKind::Piecewise,
    ][i as usize % 4]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn export_then_ingest_is_identity(k in 0u8..4, seed in 0u64..1000, noise in 0.0f64..0.05, ood in 0.0f64..0.3) {
        let params = SyntheticParams {
            sequences: 2,
            frames: 30,
            joints: 3,
            noise_sigma: noise,
            ood_probability: ood,
            split: Split::Test,
            ..SyntheticParams::default()
        };
        let data = generate_synthetic(kind(k), &params, seed).unwrap();
        let mut file = tempfile::NamedTempFile::new().unwrap();
        export_jsonl(&data, &mut file).unwrap();
        file.flush().unwrap();
        let back = ingest_jsonl(file.path(), Split::Test).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn mpjpe_ignores_common_translation(
        offset in proptest::array::uniform3(-10.0f64..10.0), seed in 0u64..100,
    ) {
        let samples = gaussian_oracle_samples(20, 10, 2, 25.0, seed);
        let preds: Vec<MotionPrediction> = samples.iter().map(|s| s.prediction.clone()).collect();
        let truths: Vec<Vec<Pose>> = samples.iter().map(|s| s.truth.clone()).collect();
        let shift = Vector3::from(offset);
        let moved_preds: Vec<MotionPrediction> = preds
            .iter()
            .map(|p| MotionPrediction::from_parts(p.poses.iter().map(|q| q.translated(&shift)).collect(), p.covs.clone()))
            .collect();
        let moved_truths: Vec<Vec<Pose>> = truths
            .iter()
            .map(|w| w.iter().map(|q| q.translated(&shift)).collect())
            .collect();
        let a = mpjpe(&preds, &truths, 25.0, MpjpeMode::Global).unwrap();
        let b = mpjpe(&moved_preds, &moved_truths, 25.0, MpjpeMode::Global).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.value - y.value).abs() < 1e-6 * x.value.max(1.0));
        }
    }
}

#[test]
fn mpjpe_examples() {
    let truth = vec![(1..=10)
        .map(|k| Pose::new(vec![Vector3::new(0.0, 0.0, 3.0); 2], k as f64 * 0.04))
        .collect::<Vec<_>>()];
    let exact = vec![MotionPrediction::from_parts(
        truth[0].clone(),
        vec![PoseCovariances::isotropic(2, 0.1); 10],
    )];
    let values = mpjpe(&exact, &truth, 25.0, MpjpeMode::Global).unwrap();
    assert_eq!(
        values.iter().map(|v| v.horizon_ms).collect::<Vec<_>>(),
        vec![80.0, 160.0, 320.0, 400.0]
    );
    assert!(values.iter().all(|v| v.value == 0.0));

    let off = Vector3::new(0.006, 0.0, 0.008);
    let shifted = vec![MotionPrediction::from_parts(
        truth[0].iter().map(|p| p.translated(&off)).collect(),
        vec![PoseCovariances::isotropic(2, 0.1); 10],
    )];
    for v in mpjpe(&shifted, &truth, 25.0, MpjpeMode::Global).unwrap() {
        assert!((v.value - 10.0).abs() < 1e-9);
    }
    assert!(matches!(
        mpjpe(&shifted, &[], 25.0, MpjpeMode::Global),
        Err(HarnessError::LengthMismatch { .. })
    ));
}

#[test]
fn zero_velocity_error_grows_with_the_horizon() {
    let params = SyntheticParams {
        sequences: 2,
        frames: 80,
        speed: 1.0,
        ..SyntheticParams::default()
    };
    let data = generate_synthetic(SyntheticKind::Linear, &params, 3).unwrap();
    let lf = LastFrame::new(PredictorConfig::new(10, 10, params.joints)).unwrap();
    let report = evaluate_predictor(&data, &lf, None, 0.01, MpjpeMode::Global).unwrap();
    let at_400 = report
        .mpjpe_per_horizon
        .iter()
        .find(|v| v.horizon_ms == 400.0)
        .unwrap();
    assert!((at_400.value - 400.0).abs() < 1e-6, "{}", at_400.value);
}

#[test]
fn table2_coverage_honors_each_level() {
    let cal = gaussian_oracle_samples(2000, 1, 2, 25.0, 100);
    let test = gaussian_oracle_samples(5000, 1, 2, 25.0, 200);
    for eps in [0.01, 0.05, 0.1] {
        let report = table2_from_samples(&cal, &test, eps, 1.6, 25.0).unwrap();
        let coverage = report.conformal.coverage.unwrap();
        // The calibrated quantile is itself random; both sample sizes count.
        let sigma = (eps * (1.0 - eps) * (1.0 / 10_000.0 + 1.0 / 2000.0)).sqrt();
        assert!(coverage >= 1.0 - eps - 3.0 * sigma, "ε = {eps}: {coverage}");
    }
}

#[test]
fn table2_on_slow_low_noise_motion() {
    let params = SyntheticParams {
        sequences: 6,
        frames: 120,
        joints: 2,
        speed: 0.5,
        ..SyntheticParams::default()
    };
    let cal = generate_synthetic(SyntheticKind::Linear, &params, 1).unwrap();
    let test = generate_synthetic(SyntheticKind::Linear, &params, 2).unwrap();

    let lf = LastFrame::new(PredictorConfig::new(10, 10, 2)).unwrap();
    let report = run_table2_experiment(&cal, &test, &lf, 0.05, 1.6, 0.01).unwrap();
    assert_eq!(report.iso.coverage, Some(1.0));

    let cal_s = noisy_oracle_samples(&cal, 10, 10, 0.005, 1, 3).unwrap();
    let test_s = noisy_oracle_samples(&test, 10, 10, 0.005, 1, 4).unwrap();
    let report = table2_from_samples(&cal_s, &test_s, 0.05, 1.6, 25.0).unwrap();
    assert!(report.conformal.mean_volume.unwrap() < report.iso.mean_volume.unwrap());

    let mut csv = Vec::new();
    write_csv(&[report.conformal, report.iso], &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("method,metric,horizon_ms,value\n"));
    assert!(text.lines().any(|l| l.starts_with("iso,coverage,")));
}

fn small_table3(p: f64) -> Table3Config {
    Table3Config {
        steps: 20_000,
        ood_probability: p,
        cal_windows: 200,
        seed: 12,
        ..Table3Config::default()
    }
}

#[test]
fn table3_without_ood_accepts_every_step() {
    for row in run_table3_experiment(&small_table3(0.0)).unwrap() {
        assert_eq!(row.report.invalid_h_rate, Some(0.0), "N_req {}", row.n_req);
        assert_eq!(
            row.report.motion_valid_rate,
            Some(1.0),
            "N_req {}",
            row.n_req
        );
    }
}

#[test]
fn table3_orders_the_requirements() {
    let cfg = small_table3(0.05);
    let rows = run_table3_experiment(&cfg).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.n_req).collect::<Vec<_>>(),
        vec![3, 10, 50]
    );
    let invalid: Vec<f64> = rows
        .iter()
        .map(|r| r.report.invalid_h_rate.unwrap())
        .collect();
    let valid: Vec<f64> = rows
        .iter()
        .map(|r| r.report.motion_valid_rate.unwrap())
        .collect();
    assert!(invalid[0] <= invalid[2]);
    assert!(valid[0] > valid[1] && valid[1] > valid[2], "{valid:?}");
    assert_eq!(rows, run_table3_experiment(&cfg).unwrap());
}

#[test]
fn generation_is_seed_deterministic() {
    let params = SyntheticParams {
        noise_sigma: 0.01,
        ood_probability: 0.1,
        ..SyntheticParams::default()
    };
    for k in 0..4 {
        let a = generate_synthetic(kind(k), &params, 8).unwrap();
        assert_eq!(a, generate_synthetic(kind(k), &params, 8).unwrap());
        assert_ne!(a, generate_synthetic(kind(k), &params, 9).unwrap());
    }
}

#[test]
fn malformed_file_lines_are_reported() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, r#"{{"t": 0.0, "joints": [[0, 0, 3]]}}"#).unwrap();
    writeln!(file, r#"{{"t": 0.04, "joints": [[0, 0]]}}"#).unwrap();
    file.flush().unwrap();
    let err = ingest_jsonl(file.path(), Split::Train).unwrap_err();
    assert!(
        matches!(
            err,
            HarnessError::Schema { line: 2, .. } | HarnessError::Parse { line: 2, .. }
        ),
        "{err}"
    );

    let empty = tempfile::NamedTempFile::new().unwrap();
    assert_eq!(ingest_jsonl(empty.path(), Split::Cal).unwrap().frames(), 0);
}
