use confmotion::conformal::{
    calibrate, conformal_quantile, extend_in_time, lambda_max, nonconformity, occupancy_union,
    sphere_set, ConformalError, SphereSet,
};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_spd(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    a * a.transpose() + Matrix3::identity() * 1e-3
}

fn gaussian(rng: &mut ChaCha8Rng, c: &Matrix3<f64>) -> Vector3<f64> {
    let l = c.cholesky().unwrap().l();
    l * Vector3::from_fn(|_, _| StandardNormal.sample(rng))
}

fn spd() -> impl Strategy<Value = Matrix3<f64>> {
    proptest::array::uniform9(-1.0f64..1.0).prop_map(|v| {
        let a = Matrix3::from_row_slice(&v);
        a * a.transpose() + Matrix3::identity() * 1e-3
    })
}

#[test]
fn marginal_coverage_holds_on_gaussian_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let c = random_spd(&mut rng);
    let (n_cal, n_test) = (2000, 10_000);
    for epsilon in [0.01, 0.05, 0.1] {
        let cal: Vec<f64> = (0..n_cal)
            .map(|_| nonconformity(&gaussian(&mut rng, &c), &c).unwrap())
            .collect();
        let table = calibrate(&[vec![cal]], epsilon).unwrap();
        let set = sphere_set(&Vector3::zeros(), &c, table.alpha(0, 0), 0, 0.0).unwrap();
        let covered = (0..n_test)
            .filter(|_| set.contains(&gaussian(&mut rng, &c)))
            .count() as f64
            / n_test as f64;
        let delta = 3.0 * (epsilon * (1.0 - epsilon) / n_test as f64).sqrt();
        assert!(
            covered >= 1.0 - epsilon - delta,
            "ε = {epsilon}: coverage {covered}"
        );
    }
}

proptest! {
    #[test]
    fn smaller_epsilon_never_shrinks_alpha(
        scores in proptest::collection::vec(0.0f64..10.0, 200..400),
        e1 in 0.02f64..0.5, e2 in 0.02f64..0.5,
    ) {
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        let table = |e| calibrate(&[vec![scores.clone(), scores.iter().map(|s| s * 2.0).collect()]], e).unwrap();
        let (tight, loose) = (table(lo), table(hi));
        for j in 0..2 {
            prop_assert!(tight.alpha(0, j) >= loose.alpha(0, j));
        }
    }

    #[test]
    fn scores_are_scale_equivariant(
        c in spd(), d in proptest::array::uniform3(-2.0f64..2.0), s in 0.01f64..100.0,
    ) {
        let d = Vector3::from(d);
        let a = nonconformity(&d, &c).unwrap();
        let b = nonconformity(&(d * s), &(c * (s * s))).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn extension_contains_the_original(
        r in 0.0f64..2.0, dt in 0.0f64..5.0, v in 0.0f64..3.0,
        center in proptest::array::uniform3(-5.0f64..5.0),
    ) {
        let s = SphereSet { joint: 0, center: Vector3::from(center), radius: r, time: 1.0 };
        let e = extend_in_time(&s, 1.0 + dt, v).unwrap();
        prop_assert!(e.contains_sphere(&s));
        prop_assert!((e.radius - (r + dt * v)).abs() < 1e-12);
    }

    #[test]
    fn largest_eigenvalue_bounds_the_mean(c in spd()) {
        let l = lambda_max(&c).unwrap();
        prop_assert!(l >= c.trace() / 3.0 - 1e-12);
    }

    #[test]
    fn padding_contains_every_input(
        radii in proptest::collection::vec(0.0f64..1.0, 1..6), pad in 0.0f64..0.5,
    ) {
        let spheres: Vec<SphereSet> = radii
            .iter()
            .enumerate()
            .map(|(j, &r)| SphereSet { joint: j, center: Vector3::new(j as f64, 0.0, 0.0), radius: r, time: 0.4 })
            .collect();
        let occ = occupancy_union(&spheres, pad).unwrap();
        for (a, b) in spheres.iter().zip(&occ.spheres) {
            prop_assert!(b.contains_sphere(a));
            prop_assert_eq!(b.radius, a.radius + pad);
        }
    }
}

#[test]
fn quantile_examples() {
    let scores: Vec<f64> = (1..=19).map(f64::from).collect();
    // ⌈20·0.9⌉ = 18
    assert_eq!(conformal_quantile(&scores, 0.1).unwrap(), 18.0);
    assert!(matches!(
        conformal_quantile(&scores[..5], 0.1),
        Err(ConformalError::InsufficientCalibrationData { have: 5, .. })
    ));
    assert_eq!(
        conformal_quantile(&scores, 1.0),
        Err(ConformalError::InvalidEpsilon(1.0))
    );
}

#[test]
fn sphere_radius_uses_the_largest_eigenvalue() {
    let c = Matrix3::from_diagonal(&Vector3::new(0.04, 0.01, 0.09));
    let s = sphere_set(&Vector3::new(1.0, 2.0, 3.0), &c, 2.0, 3, 0.5).unwrap();
    assert!((s.radius - 0.6).abs() < 1e-12);
    assert_eq!((s.joint, s.time), (3, 0.5));
    assert_eq!(
        sphere_set(&Vector3::zeros(), &-c, 1.0, 0, 0.0),
        Err(ConformalError::NotPositiveDefinite)
    );
}

#[test]
fn occupancy_rejects_mixed_times() {
    let a = SphereSet {
        joint: 0,
        center: Vector3::zeros(),
        radius: 0.2,
        time: 0.0,
    };
    let b = SphereSet {
        time: 0.04,
        ..a.clone()
    };
    assert_eq!(
        occupancy_union(&[a.clone(), b], 0.1),
        Err(ConformalError::MixedTimestamps)
    );
    assert!(
        (occupancy_union(std::slice::from_ref(&a), 0.1)
            .unwrap()
            .spheres[0]
            .radius
            - 0.3)
            .abs()
            < 1e-15
    );
    assert_eq!(
        occupancy_union(std::slice::from_ref(&a), 0.0)
            .unwrap()
            .spheres,
        vec![a]
    );
}

#[test]
fn extension_backwards_in_time_fails() {
    let s = SphereSet {
        joint: 0,
        center: Vector3::zeros(),
        radius: 0.2,
        time: 1.0,
    };
    assert!(matches!(
        extend_in_time(&s, 0.5, 1.0),
        Err(ConformalError::TimeBeforeSet { .. })
    ));
}
