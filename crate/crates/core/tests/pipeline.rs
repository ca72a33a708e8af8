mod common;

use common::markov;
use confmotion::geometry::{Detection2D, StereoObservation};
use confmotion::harness::{
    default_rig, generate_synthetic, stereo_observations, SyntheticKind, SyntheticParams,
};
use confmotion::ood::{calibrate_threshold, ConstantScorer, PrecomputedScorer};
use confmotion::pipeline::{
    audit_transition, expected_invalid_fraction, OodHandling, PipelineConfig, PipelineContext,
    PipelineError, StepOutput, StepStatus,
};
use confmotion::predict::{LastFrame, PredictorConfig, RidgeDct};
use confmotion::ConformalCalibration;
use nalgebra::{Matrix2, Matrix3, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DT: f64 = 0.04;

fn run(ctx: &PipelineContext, flags: &[bool], joints: usize) -> Vec<StepOutput> {
    let cams = default_rig();
    let points = common::static_points(joints);
    let mut state = ctx.new_state();
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            ctx.step(
                &mut state,
                &common::frame(&points, (i + 1) as f64 * DT, f, &cams),
            )
            .unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_transition_passes_the_audit(
        k_i in 2usize..8, k_p in 1usize..6, n_req_frac in 0.0f64..1.0,
        events in proptest::collection::vec(0u8..10, 20..120),
    ) {
        let n_req = 1 + ((k_i - 1) as f64 * n_req_frac) as usize;
        let ctx = common::trace_context(k_i, k_p, n_req, 2);
        let cams = default_rig();
        let points = common::static_points(2);
        let mut state = ctx.new_state();
        for (i, e) in events.iter().enumerate() {
            let mut obs = common::frame(&points, (i + 1) as f64 * DT, *e < 2, &cams);
            obs.missing = *e == 9;
            let before = state.clone();
            let out = ctx.step(&mut state, &obs).unwrap();
            if let Err(msg) = audit_transition(ctx.config(), &before, &state, &out) {
                return Err(TestCaseError::fail(format!("step {}: {msg}", i + 1)));
            }
            if out.diagnostics.accepted {
                prop_assert!(state.validity().iter().rev().take(n_req).all(|v| *v));
            }
            for occ in &out.occupancies {
                prop_assert!(occ.valid || occ.spheres.is_empty());
                prop_assert!(occ.spheres.iter().all(|s| s.valid == occ.valid));
            }
        }
    }
}

#[test]
fn clean_stream_is_nominal_after_warm_up() {
    let (k_i, k_p) = (10, 4);
    let ctx = common::trace_context(k_i, k_p, 3, 3);
    let out = run(&ctx, &[false; 200], 3);
    for (i, o) in out.iter().enumerate() {
        let expected = if i + 1 < k_i {
            StepStatus::WarmingUp
        } else {
            StepStatus::Nominal
        };
        assert_eq!(o.status, expected, "step {}", i + 1);
    }
    let last = out.last().unwrap();
    assert_eq!(last.occupancies.len(), k_p);
    assert!(last
        .occupancies
        .iter()
        .all(|o| o.valid && o.spheres.len() == 3));
}

#[test]
fn full_history_requirement_blocks_for_k_i_steps() {
    let k_i = 6;
    let ctx = common::trace_context(k_i, 3, k_i, 1);
    let mut flags = vec![false; 40];
    flags[20] = true;
    let out = run(&ctx, &flags, 1);
    for (i, o) in out.iter().enumerate().skip(k_i) {
        let blocked = (20..20 + k_i).contains(&i);
        assert_eq!(o.diagnostics.accepted, !blocked, "step {}", i + 1);
    }
}

#[test]
fn full_history_requirement_matches_the_closed_form() {
    let (k_i, p, steps) = (8, 0.05, 40_000u64);
    let ctx = common::trace_context(k_i, 2, k_i, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let flags: Vec<bool> = (0..k_i as u64 + steps)
        .map(|_| rng.random::<f64>() < p)
        .collect();
    let out = run(&ctx, &flags, 1);
    let counted = &out[k_i..];
    let invalid = counted
        .iter()
        .filter(|o| o.diagnostics.recent_valid < k_i)
        .count() as f64
        / counted.len() as f64;

    let closed = expected_invalid_fraction(k_i, p, OodHandling::None).unwrap();
    let chain = markov::solve(k_i, p);
    assert!(
        (chain.blocked - closed).abs() < 1e-12,
        "chain {} vs {closed}",
        chain.blocked
    );
    let (ok, sigma) = markov::within_three_sigma(&chain, invalid, counted.len() as u64);
    assert!(ok, "pipeline {invalid} vs {closed} (σ {sigma})");
}

#[test]
fn reuse_estimate_matches_the_gate_chain() {
    let (k_i, p, steps) = (50, 0.05, 200_000);
    let closed = expected_invalid_fraction(k_i, p, OodHandling::None).unwrap();
    assert!((closed - 0.9231).abs() < 1e-4);
    assert_eq!(
        expected_invalid_fraction(k_i, 0.0, OodHandling::None).unwrap(),
        0.0
    );
    for n_req in [3, 10] {
        let est = expected_invalid_fraction(
            k_i,
            p,
            OodHandling::Reuse {
                n_req,
                steps,
                seed: 9,
            },
        )
        .unwrap();
        assert!(est < closed);
        let (ok, sigma) = markov::within_three_sigma(&markov::solve(n_req, p), est, steps);
        assert!(ok, "N_req {n_req}: {est} (σ {sigma})");
    }
    assert!(matches!(
        expected_invalid_fraction(k_i, 1.5, OodHandling::None),
        Err(PipelineError::InvalidProbability(_))
    ));
}

#[test]
fn degenerate_joint_falls_back_to_the_prediction() {
    let (k_i, k_p) = (5, 3);
    let ctx = common::trace_context(k_i, k_p, 2, 2);
    let cams = default_rig();
    let points = common::static_points(2);
    let mut state = ctx.new_state();
    for i in 1..=10 {
        ctx.step(
            &mut state,
            &common::frame(&points, i as f64 * DT, false, &cams),
        )
        .unwrap();
    }
    let expected = state.motion_buffer().first().unwrap().0.joints[1];
    let mut obs = common::frame(&points, 11.0 * DT, false, &cams);
    obs.cam2[1] = Detection2D::new(1, Vector2::new(f64::NAN, 0.0), Matrix2::identity());
    let out = ctx.step(&mut state, &obs).unwrap();
    assert_eq!(out.status, StepStatus::Nominal);
    assert_eq!(out.diagnostics.degraded_joints, vec![1]);
    let (pose, covs) = state.pose_buffer().last().unwrap();
    assert_eq!(pose.joints[1], expected);
    let s = ctx.config().sigma_fallback;
    assert_eq!(covs.covs[1], Matrix3::identity() * (s * s));
}

#[test]
fn missing_human_and_cold_start_ood() {
    let ctx = common::trace_context(4, 2, 2, 1);
    let cams = default_rig();
    let points = common::static_points(1);
    let mut state = ctx.new_state();
    let out = ctx
        .step(&mut state, &common::frame(&points, DT, true, &cams))
        .unwrap();
    assert_eq!(out.status, StepStatus::PoseOod);
    assert!(out.diagnostics.frame_discarded && state.pose_buffer().is_empty());
    for i in 2..=6 {
        ctx.step(
            &mut state,
            &common::frame(&points, i as f64 * DT, false, &cams),
        )
        .unwrap();
    }
    let mut gone = StereoObservation::new(7.0 * DT, Vec::new(), Vec::new());
    gone.missing = true;
    let out = ctx.step(&mut state, &gone).unwrap();
    assert_eq!(out.status, StepStatus::AwaitingRecovery);
    assert_eq!(out.diagnostics.validity, Some(false));
}

#[test]
fn contexts_are_shared_across_threads() {
    let ctx = common::trace_context(10, 5, 3, 2);
    let flags: Vec<bool> = (0..80).map(|i| i % 17 == 0).collect();
    let reference = serde_json::to_string(&run(&ctx, &flags, 2)).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|_| s.spawn(|| serde_json::to_string(&run(&ctx, &flags, 2)).unwrap()))
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), reference);
        }
    });
}

#[test]
fn noisy_streams_are_deterministic() {
    let cams = default_rig();
    let params = SyntheticParams {
        sequences: 1,
        frames: 150,
        joints: 2,
        ood_probability: 0.1,
        ..SyntheticParams::default()
    };
    let data = generate_synthetic(SyntheticKind::Sinusoidal, &params, 5).unwrap();
    let obs = stereo_observations(&data.sequences[0], &cams.0, &cams.1, 0.7, 6).unwrap();
    let trajectory = || {
        let ctx = common::trace_context(20, 5, 3, 2);
        let mut state = ctx.new_state();
        obs.iter()
            .map(|o| {
                ctx.step(&mut state, o).unwrap();
                state.clone()
            })
            .collect::<Vec<_>>()
    };
    let (a, b) = (trajectory(), trajectory());
    // compare bit patterns so NaN sentinels count as equal
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}

fn builder_parts() -> (PipelineConfig, ConformalCalibration) {
    let cfg = PipelineConfig {
        k_i: 10,
        k_p: 5,
        ..PipelineConfig::default()
    };
    let cal = ConformalCalibration {
        epsilon: cfg.epsilon,
        n_cal: 100,
        alpha: vec![vec![2.0; 2]; 5],
    };
    (cfg, cal)
}

#[test]
fn builder_rejects_incomplete_setups() {
    let (cfg, cal) = builder_parts();
    let (c1, c2) = default_rig();
    let tau = calibrate_threshold(&[0.0; 100], 0.05).unwrap();
    let pred = || LastFrame::new(PredictorConfig::new(10, 5, 2)).unwrap();
    let base = || {
        PipelineContext::builder(cfg.clone(), c1.clone(), c2.clone())
            .pose_scorer(PrecomputedScorer)
            .motion_scorer(ConstantScorer(0.0))
            .thresholds(tau, tau)
    };

    assert!(base()
        .predictor(pred())
        .calibration(cal.clone())
        .build()
        .is_ok());
    assert!(matches!(
        base().calibration(cal.clone()).build(),
        Err(PipelineError::NotFitted(_))
    ));
    let unfitted = RidgeDct::new(PredictorConfig::new(10, 5, 2)).unwrap();
    assert!(matches!(
        base().predictor(unfitted).calibration(cal.clone()).build(),
        Err(PipelineError::NotFitted(_))
    ));
    assert!(matches!(
        base().predictor(pred()).build(),
        Err(PipelineError::NotCalibrated(_))
    ));
    let other_eps = ConformalCalibration {
        epsilon: 0.05,
        ..cal.clone()
    };
    assert!(matches!(
        base().predictor(pred()).calibration(other_eps).build(),
        Err(PipelineError::NotCalibrated(_))
    ));
    let short = ConformalCalibration {
        alpha: vec![vec![2.0; 2]; 3],
        ..cal.clone()
    };
    assert!(matches!(
        base().predictor(pred()).calibration(short).build(),
        Err(PipelineError::NotCalibrated(_))
    ));
    let wrong_k = LastFrame::new(PredictorConfig::new(12, 5, 2)).unwrap();
    assert!(matches!(
        base().predictor(wrong_k).calibration(cal.clone()).build(),
        Err(PipelineError::InvalidConfig(_))
    ));
    let bad_cfg = PipelineConfig {
        n_req: 11,
        ..cfg.clone()
    };
    assert!(PipelineContext::builder(bad_cfg, c1.clone(), c2.clone())
        .predictor(pred())
        .calibration(cal)
        .build()
        .is_err());
}
