use std::f64::consts::PI;

use fwspde::coefficients::{DiffusionSpec, DriftSpec, NoiseSpec};
use fwspde::domain::{build_basis, DomainSpec, Field, OperatorSpec, PathField, Spectral};
use fwspde::dynamics::{coords_norm_sq, skeleton, skeleton_coords, ControlPath, Model, SimParams};
use fwspde::rate::{instanton_minimize, level_membership, rate_evaluate, InstantonProblem, Membership};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn lq_model(n: usize) -> Model<f64> {
    let d = DomainSpec::new(PI, n, n, 1).unwrap();
    let b = build_basis(&d, &OperatorSpec::uniform(1, 1.0).unwrap()).unwrap();
    Model::new(b, DriftSpec::zero(1), DiffusionSpec::constant(1, 1.0), NoiseSpec::white(0.5)).unwrap()
}

/// Minimal energy to steer `a' = -alpha a + u` from 0 to `b` in time `t`.
fn lq_oracle(b: f64, alpha: f64, t: f64) -> f64 {
    b * b * alpha / (1.0 - (-2.0 * alpha * t).exp())
}

fn mode_field(m: &Model<f64>, k: usize, amp: f64) -> Field<f64> {
    let d = *m.domain();
    let mut s = Spectral::zeros(1, d.n_modes);
    s.values[k] = amp;
    m.basis.to_grid(&s).unwrap()
}

#[test]
fn lq_recovery_along_optimal_profile() {
    let m = lq_model(64);
    let d = *m.domain();
    let (k, b, t_end, dt) = (1usize, 0.8, 1.0, 1e-3);
    let alpha = m.basis.eigenvalue(0, k);
    let phi = PathField::from_fn(d, dt, 1000, |t, _, xi| {
        b * (alpha * t).sinh() / (alpha * t_end).sinh() * m.basis.eigenfunction_at(k, xi)
    })
    .unwrap();
    let r = rate_evaluate(&m, &Field::zeros(d), &phi).unwrap();
    let oracle = lq_oracle(b, alpha, t_end);
    assert!(((r.value - oracle) / oracle).abs() < 1e-3, "{} vs {oracle}", r.value);
    let (mem, _) = level_membership(&m, &Field::zeros(d), &phi, oracle, 1e-3 * oracle).unwrap();
    assert_eq!(mem, Membership::Boundary);
    let (mem, _) = level_membership(&m, &Field::zeros(d), &phi, 0.5 * oracle, 1e-3 * oracle).unwrap();
    assert_eq!(mem, Membership::Outside);
}

#[test]
fn lq_instanton_matches_oracle() {
    let m = lq_model(32);
    let d = *m.domain();
    let (k, b, t_end, dt) = (0usize, 1.0, 1.0, 1e-3);
    let alpha = m.basis.eigenvalue(0, k);
    let prob = InstantonProblem::terminal(Field::zeros(d), mode_field(&m, k, b), t_end, dt);
    let r = instanton_minimize(&m, &prob).unwrap();
    let oracle = lq_oracle(b, alpha, t_end);
    assert!(((r.value - oracle) / oracle).abs() < 5e-3, "{} vs {oracle}", r.value);
    assert!(r.converged && r.upper_bound);
    // The instanton's own skeleton has the same rate under recovery.
    let p = SimParams::new(0.0, t_end, dt, 0);
    let sk = skeleton_coords(&m, &Field::zeros(d), &r.coords, &p).unwrap();
    let back = rate_evaluate(&m, &Field::zeros(d), &sk).unwrap();
    assert!(((back.value - r.value) / r.value).abs() < 1e-4);
}

#[test]
fn instanton_round_trip_improves_on_generator() {
    let m = lq_model(32);
    let d = *m.domain();
    let dt = 1e-3;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let jm = m.j_modes();
    let u0: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..jm).map(|k| if k < 3 { StandardNormal.sample(&mut rng) } else { 0.0 }).collect())
        .collect();
    let p = SimParams::new(0.0, 0.2, dt, 0);
    let y = skeleton_coords(&m, &Field::zeros(d), &u0, &p).unwrap().last().clone();
    let r = instanton_minimize(&m, &InstantonProblem::terminal(Field::zeros(d), y, 0.2, dt)).unwrap();
    assert!(r.value <= coords_norm_sq(dt, &u0) / 2.0 + 1e-6);
}

#[test]
fn quadratic_scaling() {
    let m = lq_model(32);
    let d = *m.domain();
    let dt = 1e-3;
    let p = SimParams::new(0.0, 0.1, dt, 0);
    let jm = m.j_modes();
    let c: Vec<Vec<f64>> = (0..100).map(|s| (0..jm).map(|k| ((s + k) as f64).sin() / (1.0 + k as f64)).collect()).collect();
    let u = ControlPath::from_coords(&m.basis, jm, dt, &c).unwrap();
    let x = Field::from_fn(d, |_, xi| xi.sin()).unwrap();
    let free = skeleton(&m, &x, None, &p).unwrap();
    let s1 = skeleton(&m, &x, Some(&u), &p).unwrap();
    let s3 = skeleton(&m, &x, Some(&u.scaled(3.0)), &p).unwrap();
    let d1 = s1.sub(&free).unwrap();
    let d3 = s3.sub(&free).unwrap();
    let err = fwspde::domain::path_distance(&d3, &d1.scaled(3.0)).unwrap();
    assert!(err < 1e-8 * d3.sup_norm());
    let i1 = rate_evaluate(&m, &x, &s1).unwrap().value;
    let i3 = rate_evaluate(&m, &x, &s3).unwrap().value;
    assert!((i3 / i1 - 9.0).abs() < 1e-8);
    assert!(((i1 - u.norm_sq() / 2.0) / i1).abs() < 1e-6);
}
