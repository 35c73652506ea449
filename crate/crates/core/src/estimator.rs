//! Solvers for the GE: the fixed-point iteration on the M-equation and a
//! Riemannian descent with Armijo backtracking, along the gradient or along
//! the Newton direction of the exact covariant Hessian.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{boundary_flag, VelocityFlag};
use crate::error::{GsError, Result};
use crate::grassmann::{numerical_rank, range_basis, EmpiricalMeasure, McSpec, SubspacePoint, RANK_TOL};
use crate::manifold::{distance, sym_apply, sym_eigen, sym_sqrt, tangent_project, ScatterMatrix};
use crate::mfunc::{residual_from_sum, AtomBank, MeasureLike};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop once tr((M − (r/m)Id)²) ≤ tol.
    pub tol: f64,
    /// Fraction of the geodesic from Σ to the update that is taken per step.
    pub damping: f64,
    pub divergence_window: usize,
    /// Growth of distance(Σ_k, Σ₀) over one window that signals escape.
    pub divergence_growth: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-12, damping: 1.0, divergence_window: 25, divergence_growth: 10.0 }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(GsError::Usage(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(GsError::Usage(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if self.divergence_window == 0 {
            return Err(GsError::Usage("divergence_window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind")]
pub enum SolverStatus {
    Converged,
    DivergedToBoundary { flag: VelocityFlag },
    MaxIterations,
}

impl SolverStatus {
    pub fn is_converged(&self) -> bool {
        matches!(self, SolverStatus::Converged)
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub residual: f64,
    pub distance: f64,
    /// ℓ_P at the iterate, recorded by the descent solver.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loglik: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GEResult {
    pub estimate: ScatterMatrix,
    pub residual: f64,
    pub iterations: usize,
    pub status: SolverStatus,
    pub trace: Vec<TraceRow>,
}

/// Fails with an existence error when the atoms span a proper subspace of ℝᵐ.
fn check_spanning(meas: &EmpiricalMeasure) -> Result<()> {
    let m = meas.m();
    let mut gram = DMatrix::<f64>::zeros(m, m);
    for p in meas.points() {
        let q = p.orthonormal();
        gram += q * q.transpose();
    }
    if numerical_rank(&gram, RANK_TOL) < m {
        let witness = SubspacePoint::new(range_basis(&gram, RANK_TOL))?;
        return Err(GsError::Existence {
            message: format!("atoms span a {}-dimensional subspace of R^{m}", witness.r()),
            witness: Some(witness),
        });
    }
    Ok(())
}

fn check_start(meas: &EmpiricalMeasure, sigma0: &ScatterMatrix) -> Result<()> {
    if sigma0.dim() != meas.m() {
        return Err(GsError::Usage(format!(
            "starting point is {0}x{0} but the data live in R^{1}",
            sigma0.dim(),
            meas.m()
        )));
    }
    Ok(())
}

/// Σ^{1/2}(Σ^{-1/2}TΣ^{-1/2})^s Σ^{1/2}: the point at fraction s of the geodesic from Σ to T.
fn geodesic_fraction(sigma: &ScatterMatrix, target: &ScatterMatrix, s: f64) -> Result<ScatterMatrix> {
    if s == 1.0 {
        return Ok(target.clone());
    }
    let root = sym_sqrt(sigma);
    let c = &root.g_inv * target.matrix() * &root.g_inv;
    let (vals, vecs) = sym_eigen(&c);
    let p = sym_apply(&vals, &vecs, |x| x.powf(s));
    ScatterMatrix::normalized(&root.g * p * &root.g)
}

/// Escape test over the last window of recorded iterates.
fn escaping(trace: &[TraceRow], opts: &SolverOptions) -> bool {
    let k = trace.len();
    if k <= opts.divergence_window {
        return false;
    }
    let now = &trace[k - 1];
    let then = &trace[k - 1 - opts.divergence_window];
    now.distance - then.distance >= opts.divergence_growth
        && now.residual > opts.tol
        && now.residual >= 1e-2 * then.residual
}

/// After the residual first drops below tol, iteration continues until
/// `POLISH_PATIENCE` consecutive steps fail to cut the best residual by
/// `POLISH_RATIO`; the best iterate is returned.
const POLISH_RATIO: f64 = 0.9;
const POLISH_PATIENCE: usize = 5;

struct Best {
    sigma: ScatterMatrix,
    residual: f64,
    iteration: usize,
    stalled: usize,
}

/// Records a below-tolerance iterate; returns true when polishing should stop.
fn polish(best: &mut Option<Best>, sigma: &ScatterMatrix, residual: f64, iteration: usize) -> bool {
    match best {
        Some(b) if residual >= POLISH_RATIO * b.residual => {
            b.stalled += 1;
            b.stalled >= POLISH_PATIENCE
        }
        _ => {
            *best = Some(Best { sigma: sigma.clone(), residual, iteration, stalled: 0 });
            residual == 0.0
        }
    }
}

fn converged(best: Best, mut trace: Vec<TraceRow>, offset: usize) -> GEResult {
    trace.truncate(best.iteration - offset + 1);
    GEResult {
        estimate: best.sigma,
        residual: best.residual,
        iterations: best.iteration,
        status: SolverStatus::Converged,
        trace,
    }
}

fn diverged(iterates: &[ScatterMatrix]) -> SolverStatus {
    let flag = boundary_flag(iterates).unwrap_or_default();
    SolverStatus::DivergedToBoundary { flag }
}

/// Σ ← normalize((m/r)·Σ_j w_j X_j(X_jᵀΣ⁻¹X_j)⁻¹X_jᵀ), damped along the geodesic.
pub fn fixed_point_solve(
    meas: &EmpiricalMeasure,
    sigma0: &ScatterMatrix,
    opts: &SolverOptions,
) -> Result<GEResult> {
    opts.validate()?;
    check_start(meas, sigma0)?;
    check_spanning(meas)?;
    let bank = AtomBank::new(meas);
    let mut sigma = sigma0.clone();
    let mut iterates = vec![sigma.clone()];
    let mut trace = Vec::new();
    let mut best = None;
    for iteration in 0..=opts.max_iter {
        let sigma_inv = sigma.inverse();
        let s = bank.weighted_sum(&sigma_inv)?;
        let residual = residual_from_sum(&s, &sigma_inv, meas.r());
        trace.push(TraceRow { iteration, residual, distance: distance(sigma0, &sigma), loglik: None });
        if residual <= opts.tol {
            if polish(&mut best, &sigma, residual, iteration) || iteration == opts.max_iter {
                return Ok(converged(best.expect("recorded"), trace, 0));
            }
        } else if let Some(b) = best.as_mut() {
            b.stalled += 1;
            if b.stalled >= POLISH_PATIENCE || iteration == opts.max_iter {
                return Ok(converged(best.expect("checked"), trace, 0));
            }
        }
        let status = if best.is_some() {
            None
        } else if escaping(&trace, opts) {
            Some(diverged(&iterates))
        } else if iteration == opts.max_iter {
            Some(SolverStatus::MaxIterations)
        } else {
            None
        };
        if let Some(status) = status {
            return Ok(GEResult { estimate: sigma, residual, iterations: iteration, status, trace });
        }
        let next = ScatterMatrix::normalized(s).and_then(|t| geodesic_fraction(&sigma, &t, opts.damping));
        match next {
            Ok(next) => sigma = next,
            Err(GsError::Domain(_)) if best.is_none() => {
                let status = diverged(&iterates);
                return Ok(GEResult { estimate: sigma, residual, iterations: iteration, status, trace });
            }
            Err(GsError::Domain(_)) => return Ok(converged(best.expect("checked"), trace, 0)),
            Err(e) => return Err(e),
        }
        iterates.push(sigma.clone());
    }
    unreachable!("the loop returns at iteration max_iter")
}

/// ℓ_P(Σ) = ½Σ_j w_j log det(Q_jᵀΣ⁻¹Q_j) through Cholesky factors.
fn objective(meas: &EmpiricalMeasure, sigma_inv: &DMatrix<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (p, w) in meas.iter() {
        let q = p.orthonormal();
        let k = q.transpose() * sigma_inv * q;
        let chol = k
            .cholesky()
            .ok_or_else(|| GsError::Domain("XᵀΣ⁻¹X is not positive definite".into()))?;
        let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        total += w * 0.5 * logdet;
    }
    Ok(total)
}

/// Σ_{k+1} = geodesic(Σ_k, −η·grad ℓ_P, 1) with Armijo backtracking on ℓ_P.
pub fn riemannian_descent<M: MeasureLike + ?Sized>(
    meas: &M,
    sigma0: &ScatterMatrix,
    opts: &SolverOptions,
    mc: Option<&McSpec>,
) -> Result<GEResult> {
    opts.validate()?;
    let meas = meas.resolve_empirical(mc)?;
    descend(meas.as_ref(), sigma0, sigma0, 0, opts, Direction::Gradient)
}

/// Riemannian Newton iteration with Armijo backtracking on ℓ_P. The step
/// solves Hess ℓ_P(Σ)[Z] = −grad ℓ_P(Σ) and falls back to the gradient where
/// the Hessian is not positive definite.
pub fn newton_descent(meas: &EmpiricalMeasure, sigma0: &ScatterMatrix, opts: &SolverOptions) -> Result<GEResult> {
    opts.validate()?;
    descend(meas, sigma0, sigma0, 0, opts, Direction::Newton)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Gradient,
    Newton,
}

/// Orthonormal basis of the trace-zero symmetric m×m matrices under tr(AB).
fn traceless_basis(m: usize) -> Vec<DMatrix<f64>> {
    let mut basis = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let mut e = DMatrix::zeros(m, m);
            e[(i, j)] = std::f64::consts::FRAC_1_SQRT_2;
            e[(j, i)] = std::f64::consts::FRAC_1_SQRT_2;
            basis.push(e);
        }
    }
    // Diagonal directions (1, …, 1, −k, 0, …)/√(k(k+1)).
    for k in 1..m {
        let c = 1.0 / ((k * (k + 1)) as f64).sqrt();
        let mut e = DMatrix::zeros(m, m);
        for i in 0..k {
            e[(i, i)] = c;
        }
        e[(k, k)] = -(k as f64) * c;
        basis.push(e);
    }
    basis
}

/// Newton direction in whitened coordinates Θ_j = g⁻¹X_j, where the metric is
/// tr(AB) and ∇_Z grad ℓ_U = ¼(ZΠ + ΠZ) − ½ΠZΠ with Π the projector onto Θ_j.
fn newton_direction(
    meas: &EmpiricalMeasure,
    g_inv: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    basis: &[DMatrix<f64>],
) -> Option<DMatrix<f64>> {
    let pis: Vec<(DMatrix<f64>, f64)> = meas
        .iter()
        .map(|(p, w)| {
            let q = (g_inv * p.orthonormal()).qr().q();
            (&q * q.transpose(), w)
        })
        .collect();
    let d = basis.len();
    let images: Vec<DMatrix<f64>> = basis
        .iter()
        .map(|e| {
            let mut h = DMatrix::zeros(e.nrows(), e.ncols());
            for (pi, w) in &pis {
                h += (e * pi + pi * e) * (0.25 * w) - pi * e * pi * (0.5 * w);
            }
            h
        })
        .collect();
    let hess = DMatrix::from_fn(d, d, |a, b| 0.5 * (basis[a].dot(&images[b]) + basis[b].dot(&images[a])));
    let rhs = nalgebra::DVector::from_fn(d, |a, _| -basis[a].dot(grad));
    let coef = hess.cholesky()?.solve(&rhs);
    let mut z = DMatrix::zeros(grad.nrows(), grad.ncols());
    for (c, e) in coef.iter().zip(basis) {
        z += e * *c;
    }
    Some(z)
}

/// Descent from `start`; trace distances are measured from `origin` and iterations start at `offset`.
fn descend(
    meas: &EmpiricalMeasure,
    start: &ScatterMatrix,
    origin: &ScatterMatrix,
    offset: usize,
    opts: &SolverOptions,
    direction: Direction,
) -> Result<GEResult> {
    check_start(meas, start)?;
    check_spanning(meas)?;
    let (m, r) = (meas.m() as f64, meas.r() as f64);
    let bank = AtomBank::new(meas);
    // The fixed-point step corresponds to η = 2m/r in whitened coordinates.
    let natural = 2.0 * m / r;
    let mut eta = natural;
    let basis = traceless_basis(meas.m());
    let mut sigma = start.clone();
    let mut sigma_inv = sigma.inverse();
    let mut f = objective(meas, &sigma_inv)?;
    let mut iterates = vec![sigma.clone()];
    let mut trace = Vec::new();
    let mut best = None;
    for step in 0..=opts.max_iter {
        let iteration = offset + step;
        let s = bank.weighted_sum(&sigma_inv)?;
        let residual = residual_from_sum(&s, &sigma_inv, meas.r());
        trace.push(TraceRow { iteration, residual, distance: distance(origin, &sigma), loglik: Some(f) });
        if residual <= opts.tol {
            if polish(&mut best, &sigma, residual, iteration) || step == opts.max_iter {
                return Ok(converged(best.expect("recorded"), trace, offset));
            }
        } else if let Some(b) = best.as_mut() {
            b.stalled += 1;
            if b.stalled >= POLISH_PATIENCE || step == opts.max_iter {
                return Ok(converged(best.expect("checked"), trace, offset));
            }
        }
        let status = if best.is_some() {
            None
        } else if escaping(&trace, opts) {
            Some(diverged(&iterates))
        } else if step == opts.max_iter {
            Some(SolverStatus::MaxIterations)
        } else {
            None
        };
        if let Some(status) = status {
            return Ok(GEResult { estimate: sigma, residual, iterations: iteration, status, trace });
        }
        // grad = (r/2m)Σ − ½S, with squared norm ¼·residual.
        let grad = tangent_project(&sigma, &(sigma.matrix() * (r / (2.0 * m)) - &s * 0.5))?;
        let grad_sq = residual / 4.0;
        let root = sym_sqrt(&sigma);
        let v = &root.g_inv * grad.matrix() * &root.g_inv;
        let newton = match direction {
            Direction::Newton => newton_direction(meas, &root.g_inv, &v, &basis)
                .map(|z| (z.dot(&v), z))
                .filter(|(slope, _)| *slope < 0.0),
            Direction::Gradient => None,
        };
        let used_newton = newton.is_some();
        let (dir, slope, mut t) = match newton {
            Some((slope, z)) => (z, slope, 1.0),
            None => (-&v, -grad_sq, eta),
        };
        let (vals, vecs) = sym_eigen(&dir);
        let mut accepted = None;
        for _ in 0..80 {
            let e = sym_apply(&vals, &vecs, |x| (t * x).exp());
            if let Ok(cand) = ScatterMatrix::normalized(&root.g * e * &root.g) {
                let cand_inv = cand.inverse();
                if let Ok(fc) = objective(meas, &cand_inv) {
                    if fc <= f + 1e-4 * t * slope {
                        accepted = Some((cand, cand_inv, fc));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !used_newton {
            eta = t;
        }
        match accepted {
            Some((cand, cand_inv, fc)) => {
                sigma = cand;
                sigma_inv = cand_inv;
                f = fc;
                if !used_newton {
                    eta = (eta * 2.0).min(64.0 * natural);
                }
                iterates.push(sigma.clone());
            }
            // No decrease is measurable in floating point: the iterate is stationary to rounding.
            None if best.is_some() => return Ok(converged(best.expect("checked"), trace, offset)),
            None => {
                let status = SolverStatus::MaxIterations;
                return Ok(GEResult { estimate: sigma, residual, iterations: iteration, status, trace });
            }
        }
    }
    unreachable!("the loop returns at iteration max_iter")
}

/// Fixed-point iteration, continued by Newton descent if it runs out of iterations.
pub fn solve(meas: &EmpiricalMeasure, sigma0: &ScatterMatrix, opts: &SolverOptions) -> Result<GEResult> {
    let first = fixed_point_solve(meas, sigma0, opts)?;
    if !matches!(first.status, SolverStatus::MaxIterations) {
        return Ok(first);
    }
    let mut second = descend(meas, &first.estimate, sigma0, first.iterations, opts, Direction::Newton)?;
    let mut trace = first.trace;
    trace.extend(second.trace.into_iter().skip(1));
    second.trace = trace;
    Ok(second)
}

/// tr((M(Σ) − (r/m)Id)²), equal to 4·h(Σ).
pub fn residual<M: MeasureLike + ?Sized>(meas: &M, sigma: &ScatterMatrix, mc: Option<&McSpec>) -> Result<f64> {
    let meas = meas.resolve_empirical(mc)?;
    if sigma.dim() != meas.m() {
        return Err(GsError::Usage("dimension mismatch".into()));
    }
    AtomBank::new(meas.as_ref()).residual(&sigma.inverse())
}
