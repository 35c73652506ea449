//! Points of the Grassmannian G(m, r), Grassmannian distributions 𝔾_Σ,
//! Σ-orthogonal projectors, density ratios, Busemann functions and the
//! ρ-function of the maximal parabolic P_r.
//!
//! A [`SubspacePoint`] keeps the basis it was given and an orthonormal basis
//! of the same span; every span-level computation uses the orthonormal one.

use std::borrow::Cow;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GsError, Result};
use crate::manifold::{sym_sqrt, ScatterMatrix, MAX_CONDITION};

/// Relative singular-value cutoff for rank and intersection decisions.
pub const RANK_TOL: f64 = 1e-10;

/// A linear subspace of ℝ^m of dimension r, 0 < r < m.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SubspacePoint {
    basis: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl SubspacePoint {
    /// Wraps an m×r basis; fails unless its columns are numerically independent and 0 < r < m.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let (m, r) = basis.shape();
        if r == 0 || r >= m {
            return Err(GsError::Domain(format!("subspace dimension {r} not in 1..{m}")));
        }
        if basis.iter().any(|x| !x.is_finite()) {
            return Err(GsError::Domain("basis has non-finite entries".into()));
        }
        let q = if r == 1 {
            let n = basis.norm();
            if !(n > 0.0) {
                return Err(GsError::Domain("basis vector is zero".into()));
            }
            &basis / n
        } else {
            let svd = basis.clone().svd(true, false);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if !(smin > RANK_TOL * smax) {
                return Err(GsError::Domain(format!(
                    "basis is rank deficient (singular values {smin:e} / {smax:e})"
                )));
            }
            svd.u.expect("left singular vectors requested")
        };
        Ok(Self { basis, q })
    }

    fn from_orthonormal(q: DMatrix<f64>) -> Self {
        Self { basis: q.clone(), q }
    }

    /// span(e_i : i ∈ idx) in ℝ^m.
    pub fn coordinate(m: usize, idx: &[usize]) -> Result<Self> {
        let mut x = DMatrix::zeros(m, idx.len());
        for (j, &i) in idx.iter().enumerate() {
            if i >= m {
                return Err(GsError::Usage(format!("coordinate index {i} out of range")));
            }
            x[(i, j)] = 1.0;
        }
        Self::new(x)
    }

    pub fn m(&self) -> usize {
        self.basis.nrows()
    }

    pub fn r(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Orthonormal basis of the span.
    pub fn orthonormal(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Euclidean orthogonal projector QQᵀ onto the span.
    pub fn euclidean_projector(&self) -> DMatrix<f64> {
        &self.q * self.q.transpose()
    }

    /// Same span, tested by rank.
    pub fn same_span(&self, other: &SubspacePoint, tol: f64) -> bool {
        self.m() == other.m() && self.r() == other.r() && dim_intersection(self, other, tol) == self.r()
    }
}

impl TryFrom<Vec<Vec<f64>>> for SubspacePoint {
    type Error = GsError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        SubspacePoint::new(crate::io::matrix_from_rows(&rows)?)
    }
}

impl From<SubspacePoint> for Vec<Vec<f64>> {
    fn from(s: SubspacePoint) -> Self {
        crate::io::matrix_to_rows(&s.basis)
    }
}

/// Numerical rank with singular values compared to `tol` times the largest.
pub fn numerical_rank(a: &DMatrix<f64>, tol: f64) -> usize {
    if a.ncols() == 0 || a.nrows() == 0 {
        return 0;
    }
    let s = a.clone().svd(false, false).singular_values;
    let smax = s.max();
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > tol * smax).count()
}

/// Orthonormal basis (possibly with zero or m columns) of the column space of `a`.
pub fn range_basis(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let m = a.nrows();
    if a.ncols() == 0 {
        return DMatrix::zeros(m, 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > tol * smax)
        .collect();
    DMatrix::from_fn(m, keep.len(), |i, j| u[(i, keep[j])])
}

/// Wraps an orthonormal basis as a subspace when its dimension is in 1..m.
pub fn proper_subspace(q: DMatrix<f64>) -> Option<SubspacePoint> {
    let (m, k) = q.shape();
    (k > 0 && k < m).then(|| SubspacePoint::from_orthonormal(q))
}

/// dim U + dim V − rank[Q_U | Q_V].
pub fn dim_intersection(u: &SubspacePoint, v: &SubspacePoint, tol: f64) -> usize {
    let stacked = hstack(u.orthonormal(), v.orthonormal());
    let rank = numerical_rank(&stacked, tol);
    (u.r() + v.r()).saturating_sub(rank)
}

/// Orthonormal basis of U + V.
pub fn subspace_sum(u: &SubspacePoint, v: &SubspacePoint, tol: f64) -> DMatrix<f64> {
    range_basis(&hstack(u.orthonormal(), v.orthonormal()), tol)
}

/// Orthonormal basis of U ∩ V: the directions of U with the smallest angle to V.
pub fn subspace_intersection(u: &SubspacePoint, v: &SubspacePoint, tol: f64) -> DMatrix<f64> {
    let k = dim_intersection(u, v, tol);
    let m = u.m();
    if k == 0 {
        return DMatrix::zeros(m, 0);
    }
    let qu = u.orthonormal();
    let qv = v.orthonormal();
    let resid = qu - qv * (qv.transpose() * qu);
    let svd = resid.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let coeffs = DMatrix::from_fn(qu.ncols(), k, |i, j| vt[(order[j], i)]);
    range_basis(&(qu * coeffs), 1e-8)
}

pub(crate) fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Weighted list of subspaces sharing (m, r).
#[derive(Clone, Debug)]
pub struct EmpiricalMeasure {
    m: usize,
    r: usize,
    points: Vec<SubspacePoint>,
    weights: Vec<f64>,
}

/// Neumaier summation, so that n copies of 1/n add up to 1 for large n.
fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut carry) = (0.0_f64, 0.0_f64);
    for &v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<SubspacePoint>, weights: Vec<f64>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| GsError::Usage("empirical measure needs at least one atom".into()))?;
        let (m, r) = (first.m(), first.r());
        if points.iter().any(|p| p.m() != m || p.r() != r) {
            return Err(GsError::Usage("atoms do not share (m, r)".into()));
        }
        if weights.len() != points.len() {
            return Err(GsError::Usage("weights and atoms differ in length".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(GsError::Usage("weights must be finite and nonnegative".into()));
        }
        let total = compensated_sum(&weights);
        if (total - 1.0).abs() > 1e-12 {
            return Err(GsError::Usage(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { m, r, points, weights })
    }

    pub fn uniform(points: Vec<SubspacePoint>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[SubspacePoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SubspacePoint, f64)> {
        self.points.iter().zip(self.weights.iter().copied())
    }

    pub fn is_uniform(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|w| (w - w0).abs() <= 1e-15)
    }

    /// Image measure under U ↦ A·U.
    pub fn act(&self, a: &DMatrix<f64>) -> Result<Self> {
        let points = self.points.iter().map(|p| act(a, p)).collect::<Result<Vec<_>>>()?;
        Ok(Self { m: self.m, r: self.r, points, weights: self.weights.clone() })
    }
}

/// Monte Carlo budget used to evaluate functionals of a Gaussian measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McSpec {
    pub draws: usize,
    pub seed: u64,
}

/// A probability measure on G(m, r).
#[derive(Clone, Debug)]
pub enum Measure {
    Empirical(EmpiricalMeasure),
    /// The Grassmannian distribution 𝔾_Σ of r-dimensional spans.
    Gaussian { sigma: ScatterMatrix, r: usize },
}

impl Measure {
    pub fn m(&self) -> usize {
        match self {
            Measure::Empirical(e) => e.m(),
            Measure::Gaussian { sigma, .. } => sigma.dim(),
        }
    }

    pub fn r(&self) -> usize {
        match self {
            Measure::Empirical(e) => e.r(),
            Measure::Gaussian { r, .. } => *r,
        }
    }

    /// Empirical measures pass through; Gaussian ones become `mc.draws` seeded samples.
    pub fn resolve(&self, mc: Option<&McSpec>) -> Result<Cow<'_, EmpiricalMeasure>> {
        match self {
            Measure::Empirical(e) => Ok(Cow::Borrowed(e)),
            Measure::Gaussian { sigma, r } => {
                let mc = mc.ok_or_else(|| {
                    GsError::Usage("Gaussian measure requires a Monte Carlo sample size".into())
                })?;
                if mc.draws == 0 {
                    return Err(GsError::Usage("Monte Carlo sample size must be positive".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
                Ok(Cow::Owned(gaussian_sample(sigma, *r, mc.draws, &mut rng)?))
            }
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Measure::Gaussian { .. })
    }
}

impl From<EmpiricalMeasure> for Measure {
    fn from(e: EmpiricalMeasure) -> Self {
        Measure::Empirical(e)
    }
}

/// Span of r i.i.d. N(0, Σ) vectors.
pub fn sample_gaussian<R: Rng + ?Sized>(sigma: &ScatterMatrix, r: usize, rng: &mut R) -> Result<SubspacePoint> {
    check_rank(sigma.dim(), r)?;
    Ok(draw_span(&sym_sqrt(sigma).g, r, rng))
}

fn check_rank(m: usize, r: usize) -> Result<()> {
    if r == 0 || r >= m {
        return Err(GsError::Usage(format!("r = {r} not in 1..{m}")));
    }
    Ok(())
}

/// span(g·Z) for a standard Gaussian m×r matrix Z, redrawn if rank deficient.
fn draw_span<R: Rng + ?Sized>(g: &DMatrix<f64>, r: usize, rng: &mut R) -> SubspacePoint {
    let m = g.nrows();
    loop {
        let z = DMatrix::<f64>::from_fn(m, r, |_, _| rng.sample(StandardNormal));
        if let Ok(p) = SubspacePoint::new(g * z) {
            return p;
        }
    }
}

/// n i.i.d. draws from 𝔾_Σ as a uniform empirical measure.
pub fn gaussian_sample<R: Rng + ?Sized>(
    sigma: &ScatterMatrix,
    r: usize,
    n: usize,
    rng: &mut R,
) -> Result<EmpiricalMeasure> {
    check_rank(sigma.dim(), r)?;
    let g = sym_sqrt(sigma).g;
    let points = (0..n).map(|_| draw_span(&g, r, rng)).collect();
    EmpiricalMeasure::uniform(points)
}

/// One draw from `meas`.
pub fn sample<R: Rng + ?Sized>(meas: &Measure, rng: &mut R) -> Result<SubspacePoint> {
    match meas {
        Measure::Gaussian { sigma, r } => sample_gaussian(sigma, *r, rng),
        Measure::Empirical(e) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (p, w) in e.iter() {
                acc += w;
                if u < acc {
                    return Ok(p.clone());
                }
            }
            let last = e.weights().iter().rposition(|&w| w > 0.0).unwrap_or(e.len() - 1);
            Ok(e.points()[last].clone())
        }
    }
}

/// ⟨A·X⟩ for invertible A.
pub fn act(a: &DMatrix<f64>, u: &SubspacePoint) -> Result<SubspacePoint> {
    if a.nrows() != u.m() || a.ncols() != u.m() {
        return Err(GsError::Usage("act: dimension mismatch".into()));
    }
    let s = a.clone().svd(false, false).singular_values;
    if !(s.min() > 1e-14 * s.max()) {
        return Err(GsError::Domain("act: matrix is singular".into()));
    }
    SubspacePoint::new(a * u.basis())
}

/// Symmetric eigen-inverse of K = QᵀΣ⁻¹Q with its log-determinant; fails when cond(K) > 1e14.
fn gram_inverse(u: &SubspacePoint, sigma_inv: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let q = u.orthonormal();
    let k = q.transpose() * sigma_inv * q;
    let e = SymmetricEigen::new((&k + k.transpose()) * 0.5);
    let (lo, hi) = (e.eigenvalues.min(), e.eigenvalues.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(GsError::Domain(format!("XᵀΣ⁻¹X is ill-conditioned ({lo:e}, {hi:e})")));
    }
    let qq = SymmetricEigen::new(q.transpose() * q).eigenvalues;
    let logdet = e.eigenvalues.iter().map(|x| x.ln()).sum::<f64>() - qq.iter().map(|x| x.ln()).sum::<f64>();
    let inv = crate::manifold::sym_apply(&e.eigenvalues, &e.eigenvectors, |x| 1.0 / x);
    Ok((inv, logdet))
}

fn check_dims(u: &SubspacePoint, sigma: &ScatterMatrix) -> Result<()> {
    if u.m() != sigma.dim() {
        return Err(GsError::Usage(format!("subspace in ℝ^{} but Σ is {}x{}", u.m(), sigma.dim(), sigma.dim())));
    }
    Ok(())
}

/// log det(XᵀΣ⁻¹X) − log det(XᵀX).
pub fn log_gram_ratio(u: &SubspacePoint, sigma: &ScatterMatrix) -> Result<f64> {
    check_dims(u, sigma)?;
    Ok(gram_inverse(u, &sigma.inverse())?.1)
}

/// Σ-orthogonal projector Pr(U, Σ) = X(XᵀΣ⁻¹X)⁻¹XᵀΣ⁻¹.
pub fn projector(u: &SubspacePoint, sigma: &ScatterMatrix) -> Result<DMatrix<f64>> {
    check_dims(u, sigma)?;
    let si = sigma.inverse();
    let (kinv, _) = gram_inverse(u, &si)?;
    let q = u.orthonormal();
    Ok(q * kinv * q.transpose() * si)
}

/// π_U(Σ) = Σ⁻¹X(XᵀΣ⁻¹X)⁻¹XᵀΣ⁻¹.
pub fn pi_matrix(u: &SubspacePoint, sigma: &ScatterMatrix) -> Result<DMatrix<f64>> {
    check_dims(u, sigma)?;
    let si = sigma.inverse();
    Ok(pi_with_inverse(u, &si)?)
}

pub(crate) fn pi_with_inverse(u: &SubspacePoint, sigma_inv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (kinv, _) = gram_inverse(u, sigma_inv)?;
    let b = sigma_inv * u.orthonormal();
    let p = &b * kinv * b.transpose();
    Ok((&p + p.transpose()) * 0.5)
}

/// (det(XᵀX) / det(XᵀΣ⁻¹X))^{m/2}: density of 𝔾_Σ against 𝔾_Id.
pub fn density_ratio(u: &SubspacePoint, sigma: &ScatterMatrix) -> Result<f64> {
    let m = u.m() as f64;
    Ok((-0.5 * m * log_gram_ratio(u, sigma)?).exp())
}

/// Busemann function b_U(Σ) = √(m/((m−r)r))·log(det(XᵀΣ⁻¹X)/det(XᵀX)).
pub fn busemann(u: &SubspacePoint, sigma: &ScatterMatrix) -> Result<f64> {
    let (m, r) = (u.m() as f64, u.r() as f64);
    Ok((m / ((m - r) * r)).sqrt() * log_gram_ratio(u, sigma)?)
}

/// The distinguished direction A = diag(λ_r·1_r, −β_r·1_{m−r}) of unit norm.
pub fn distinguished_direction(m: usize, r: usize) -> DMatrix<f64> {
    let (mf, rf) = (m as f64, r as f64);
    let lambda = ((mf - rf) / (mf * rf)).sqrt();
    let beta = (rf / (mf * (mf - rf))).sqrt();
    DMatrix::from_fn(m, m, |i, j| match (i == j, i < r) {
        (true, true) => lambda,
        (true, false) => -beta,
        _ => 0.0,
    })
}

/// ρ(h) = (det(X₀ᵀX₀) / det(X₀ᵀ(hᵀ)⁻¹h⁻¹X₀))^{m/2} with X₀ = (e₁, …, e_r).
pub fn rho(h: &DMatrix<f64>, r: usize) -> Result<f64> {
    let m = h.nrows();
    if h.ncols() != m || r == 0 || r >= m {
        return Err(GsError::Usage("rho: need square h and 0 < r < m".into()));
    }
    let det = h.determinant();
    if (det - 1.0).abs() > 1e-10 * h.norm().powi(m as i32).max(1.0) {
        return Err(GsError::Domain(format!("rho: det(h) = {det} is not 1")));
    }
    let hinv = h
        .clone()
        .try_inverse()
        .ok_or_else(|| GsError::Domain("rho: h is singular".into()))?;
    let y = hinv.columns(0, r).into_owned();
    let gram = y.transpose() * &y;
    Ok(gram.determinant().powf(-(m as f64) / 2.0))
}

/// Modular function of P_r at diag(λ₁·1_r, λ₂·1_{m−r}): |λ₁|^{mr}.
pub fn modular_parabolic(lambda1: f64, m: usize, r: usize) -> Result<f64> {
    if lambda1 == 0.0 || !lambda1.is_finite() {
        return Err(GsError::Domain("modular_parabolic: λ₁ must be nonzero".into()));
    }
    Ok(lambda1.abs().powi((m * r) as i32))
}
