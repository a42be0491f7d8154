//! Least-squares operator recovery on exactly linear data.

mod support;

use knav_core::sysid::{fit_snapshots, DEFAULT_RCOND};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use support::{random_system, rollout};

#[test]
fn recovers_random_linear_systems() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..20 {
        let sys = random_system(&mut rng);
        let (p, m) = (sys.a.nrows(), sys.b.ncols());
        let samples = 10 * (p + m) * (p + m);
        let (targets, sources) = rollout(&sys, samples, &mut rng);
        let (k, gram) = fit_snapshots(&targets, &sources, DEFAULT_RCOND).unwrap();
        let a_err = (k.columns(0, p) - &sys.a).norm();
        let b_err = (k.columns(p, m) - &sys.b).norm();
        assert!(a_err <= 1e-8 && b_err <= 1e-8, "case {case} (p={p}, m={m}): |dA|={a_err:e} |dB|={b_err:e}");
        let normal = gram.normal_equation_residual(&k);
        assert!(normal <= 1e-8, "case {case}: normal-equation residual {normal:e}");
        assert!(gram.residual_per_pair(&k) < 1e-12);
    }
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn rank_deficient_sources_give_minimum_norm_solution() {
    // The second source row duplicates the first: only the sum of their
    // coefficients is identifiable, and the pseudo-inverse splits it evenly.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 200;
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let sources = DMatrix::from_fn(2, n, |_, c| x[c]);
    let targets = DMatrix::from_fn(1, n, |_, c| 3.0 * x[c]);
    let (k, gram) = fit_snapshots(&targets, &sources, DEFAULT_RCOND).unwrap();
    assert!((k[(0, 0)] - 1.5).abs() < 1e-10 && (k[(0, 1)] - 1.5).abs() < 1e-10, "{k}");
    assert!(gram.normal_equation_residual(&k) <= 1e-8);
}
