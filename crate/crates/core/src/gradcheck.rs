//! Finite-difference suites for the analytic derivatives: gradient and Hessian
//! quadratic form of ℓ_P, grad h, and the Busemann normalization along the
//! distinguished ray.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::grassmann::{busemann, distinguished_direction, EmpiricalMeasure, SubspacePoint};
use crate::manifold::{geodesic, inner, random_scatter, random_unit_tangent, sym_exp, ScatterMatrix};
use crate::mfunc::{grad, grad_h, h_value, hess_quadform, loglik};

pub const GRAD_TOL: f64 = 1e-6;
pub const HESS_TOL: f64 = 1e-5;
pub const GRAD_H_TOL: f64 = 1e-5;
pub const BUSEMANN_TOL: f64 = 1e-8;

const GRAD_STEP: f64 = 1e-5;
const HESS_STEP: f64 = 1e-3;

/// Relative error with a floor that keeps near-zero derivatives from dividing by noise.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl SuiteResult {
    fn new(name: &str, errors: &[f64], tolerance: f64) -> Self {
        let max_error = errors.iter().fold(0.0_f64, |a, &b| a.max(b));
        Self { name: name.into(), cases: errors.len(), max_error, tolerance, pass: max_error <= tolerance }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
    pub pass: bool,
}

/// Random (m, r) with m ∈ {2, 3, 4} and 1 ≤ r < m, cycling through all pairs.
pub fn case_shape(case: usize) -> (usize, usize) {
    const SHAPES: [(usize, usize); 6] = [(2, 1), (3, 1), (3, 2), (4, 1), (4, 2), (4, 3)];
    SHAPES[case % SHAPES.len()]
}

/// Empirical measure of `n` Gaussian r-spans in ℝ^m, uniform or with random weights.
pub fn random_measure<R: Rng + ?Sized>(m: usize, r: usize, n: usize, uniform: bool, rng: &mut R) -> EmpiricalMeasure {
    let points = (0..n)
        .map(|_| SubspacePoint::new(DMatrix::from_fn(m, r, |_, _| rng.sample(StandardNormal))).expect("full rank"))
        .collect();
    if uniform {
        EmpiricalMeasure::uniform(points).expect("valid measure")
    } else {
        let raw: Vec<f64> = (0..n).map(|_| 0.1 + rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        EmpiricalMeasure::new(points, raw.iter().map(|w| w / total).collect()).expect("valid measure")
    }
}

/// Central first and second differences of ℓ_P along a geodesic against
/// ⟨grad ℓ_P, W⟩_Σ and ⟨∇_W grad ℓ_P, W⟩_Σ.
pub fn derivative_errors(meas: &EmpiricalMeasure, sigma: &ScatterMatrix, w: &crate::manifold::TangentVector) -> Result<(f64, f64)> {
    let f = |t: f64| -> Result<f64> { Ok(loglik(meas, &geodesic(sigma, w, t)?, None)?.value) };
    let fd1 = (f(GRAD_STEP)? - f(-GRAD_STEP)?) / (2.0 * GRAD_STEP);
    let an1 = inner(sigma, &grad(meas, sigma, None)?.value, w)?;
    let fd2 = (f(HESS_STEP)? - 2.0 * f(0.0)? + f(-HESS_STEP)?) / (HESS_STEP * HESS_STEP);
    let an2 = hess_quadform(meas, sigma, w, None)?.value;
    Ok((rel_error(an1, fd1, 1e-8), rel_error(an2, fd2, 1e-8)))
}

/// Runs all four suites with `cases` random instances each.
pub fn gradcheck(seed: u64, cases: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut e_grad, mut e_hess, mut e_h) = (Vec::new(), Vec::new(), Vec::new());
    for case in 0..cases {
        let (m, r) = case_shape(case);
        let n = 3 + case % 6;
        let meas = random_measure(m, r, n, case % 2 == 0, &mut rng);
        let sigma = random_scatter(m, 0.6, &mut rng);
        let w = random_unit_tangent(&sigma, &mut rng);
        let (g1, g2) = derivative_errors(&meas, &sigma, &w)?;
        e_grad.push(g1);
        e_hess.push(g2);

        let uniform = random_measure(m, r, n, true, &mut rng);
        let an = inner(&sigma, &grad_h(&uniform, &sigma)?, &w)?;
        let hv = |t: f64| -> Result<f64> { h_value(&uniform, &geodesic(&sigma, &w, t)?, None) };
        let fd = (hv(GRAD_STEP)? - hv(-GRAD_STEP)?) / (2.0 * GRAD_STEP);
        e_h.push(rel_error(an, fd, 1e-8));
    }
    let mut e_b = Vec::new();
    for m in 2..=6 {
        for r in 1..m {
            let a = distinguished_direction(m, r);
            let u0 = SubspacePoint::coordinate(m, &(0..r).collect::<Vec<_>>())?;
            for k in 0..=20 {
                let t = -5.0 + 0.5 * k as f64;
                let b = busemann(&u0, &ScatterMatrix::new(sym_exp(&(&a * t)))?)?;
                e_b.push((b + t).abs());
            }
        }
    }
    let suites = vec![
        SuiteResult::new("gradient", &e_grad, GRAD_TOL),
        SuiteResult::new("hessian_quadform", &e_hess, HESS_TOL),
        SuiteResult::new("grad_h", &e_h, GRAD_H_TOL),
        SuiteResult::new("busemann_ray", &e_b, BUSEMANN_TOL),
    ];
    let pass = suites.iter().all(|s| s.pass);
    Ok(GradcheckReport { seed, suites, pass })
}
