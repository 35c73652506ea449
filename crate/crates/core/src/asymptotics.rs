//! Law of large numbers and central limit theorem for the GE at desk scale:
//! the rescaled estimate C_n, the covariances σ² and Σ₀, the tangent projector
//! Q, the Moore–Penrose inversion of QL₀Q and the limiting covariance σ∞².
//!
//! `vec` stacks columns, so vec(AXB) = (Bᵀ ⊗ A)·vec(X). Replicate `rep` of an
//! experiment draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `rep`,
//! which makes every output a function of (seed, reps, n) alone.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GsError, Result};
use crate::estimator::{solve, SolverOptions};
use crate::io::serialize_rows;
use crate::grassmann::{gaussian_sample, McSpec, Measure};
use crate::manifold::{distance, sym_sqrt, symmetrize, ScatterMatrix};
use crate::mfunc::MeasureLike;

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-10;
/// Below this many replicates normality statistics are flagged LOW_POWER.
pub const LOW_POWER_REPS: usize = 100;

/// Column-major stacking of a matrix.
pub fn vec(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of `vec` for square m×m matrices.
pub fn unvec(v: &DVector<f64>, m: usize) -> Result<DMatrix<f64>> {
    if v.len() != m * m {
        return Err(GsError::Usage(format!("vector of length {} is not vec of a {m}x{m} matrix", v.len())));
    }
    Ok(DMatrix::from_column_slice(m, m, v.as_slice()))
}

/// Kronecker product A ⊗ B.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// The commutation matrix K with K·vec(X) = vec(Xᵀ).
pub fn commutation(m: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(m * m, m * m);
    for i in 0..m {
        for j in 0..m {
            k[(j + i * m, i + j * m)] = 1.0;
        }
    }
    k
}

/// Orthogonal projection onto vec of symmetric trace-zero matrices: ½(I + K) − (1/m)vec(I)vec(I)ᵀ.
pub fn q_projector(m: usize) -> DMatrix<f64> {
    let id = vec(&DMatrix::identity(m, m));
    (DMatrix::identity(m * m, m * m) + commutation(m)) * 0.5 - &id * id.transpose() / m as f64
}

/// Projection onto the eigenvectors of a symmetric PSD matrix with eigenvalue above `rel_cutoff`·λ_max.
pub fn eigen_projector(a: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let e = symmetrize(a).symmetric_eigen();
    let top = e.eigenvalues.iter().fold(0.0_f64, |acc, x| acc.max(*x));
    let n = a.nrows();
    let mut p = DMatrix::zeros(n, n);
    for (k, &lambda) in e.eigenvalues.iter().enumerate() {
        if top > 0.0 && lambda > rel_cutoff * top {
            let v = e.eigenvectors.column(k);
            p += v * v.transpose();
        }
    }
    p
}

/// Moore–Penrose pseudo-inverse with relative singular value cutoff, and the retained rank.
pub fn pinv(a: &DMatrix<f64>, rel_cutoff: f64) -> (DMatrix<f64>, usize) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let vt = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if smax > 0.0 && s > rel_cutoff * smax {
            rank += 1;
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    (out, rank)
}

/// C_n = m/tr(Σ_P⁻¹Σ_n)·g⁻¹Σ_n g⁻¹ with g = Σ_P^{1/2}.
pub fn c_n(sigma_n: &ScatterMatrix, sigma_p: &ScatterMatrix) -> Result<DMatrix<f64>> {
    let m = sigma_p.dim();
    if sigma_n.dim() != m {
        return Err(GsError::Usage("c_n: dimension mismatch".into()));
    }
    let g_inv = sym_sqrt(sigma_p).g_inv;
    let w = symmetrize(&(&g_inv * sigma_n.matrix() * &g_inv));
    Ok(&w * (m as f64 / w.trace()))
}

/// σ² = E[vec(Π − (r/m)Id)vec(Π − (r/m)Id)ᵀ] and Σ₀ = E[Π ⊗ Π], where Π is the
/// orthogonal projector onto g⁻¹U. Both come from the same atoms or draws.
pub fn clt_moments<M: MeasureLike + ?Sized>(
    meas: &M,
    sigma_p: &ScatterMatrix,
    mc: Option<&McSpec>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let meas = meas.resolve_empirical(mc)?;
    let m = sigma_p.dim();
    if meas.m() != m {
        return Err(GsError::Usage("measure and Σ_P differ in dimension".into()));
    }
    let g_inv = sym_sqrt(sigma_p).g_inv;
    let c = meas.r() as f64 / m as f64;
    let mm = m * m;
    let mut sigma2 = DMatrix::zeros(mm, mm);
    let mut sigma0 = DMatrix::zeros(mm, mm);
    for (u, w) in meas.iter() {
        let theta = &g_inv * u.orthonormal();
        let q = theta.qr().q();
        let pi = &q * q.transpose();
        let mut centered = pi.clone();
        for i in 0..m {
            centered[(i, i)] -= c;
        }
        let v = vec(&centered);
        sigma2 += &v * v.transpose() * w;
        sigma0 += kron(&pi, &pi) * w;
    }
    Ok((symmetrize(&sigma2), symmetrize(&sigma0)))
}

pub fn sigma2<M: MeasureLike + ?Sized>(meas: &M, sigma_p: &ScatterMatrix, mc: Option<&McSpec>) -> Result<DMatrix<f64>> {
    Ok(clt_moments(meas, sigma_p, mc)?.0)
}

pub fn sigma0<M: MeasureLike + ?Sized>(meas: &M, sigma_p: &ScatterMatrix, mc: Option<&McSpec>) -> Result<DMatrix<f64>> {
    Ok(clt_moments(meas, sigma_p, mc)?.1)
}

/// The ingredients of the limiting covariance.
#[derive(Clone, Debug, Serialize)]
pub struct CltLimit {
    #[serde(serialize_with = "serialize_rows")]
    pub sigma2: DMatrix<f64>,
    #[serde(serialize_with = "serialize_rows")]
    pub sigma0: DMatrix<f64>,
    /// L₀ = (r/m)Id_{m²} − Σ₀.
    #[serde(serialize_with = "serialize_rows")]
    pub l0: DMatrix<f64>,
    #[serde(serialize_with = "serialize_rows")]
    pub q: DMatrix<f64>,
    /// [QL₀Q]⁺.
    #[serde(serialize_with = "serialize_rows")]
    pub l0_pinv: DMatrix<f64>,
    #[serde(serialize_with = "serialize_rows")]
    pub sigma_inf: DMatrix<f64>,
}

/// σ∞² = [QL₀Q]⁺σ²([QL₀Q]⁺)ᵀ with Q the analytic tangent projector.
///
/// Fails with a degeneracy error when QL₀Q has rank below dim Im(Q) = (m−1)(m+2)/2.
pub fn clt_limit<M: MeasureLike + ?Sized>(meas: &M, sigma_p: &ScatterMatrix, mc: Option<&McSpec>) -> Result<CltLimit> {
    let m = sigma_p.dim();
    let r = meas.resolve_empirical(mc)?.r();
    let (sigma2, sigma0) = clt_moments(meas, sigma_p, mc)?;
    let mm = m * m;
    let l0 = DMatrix::identity(mm, mm) * (r as f64 / m as f64) - &sigma0;
    let q = q_projector(m);
    let restricted = symmetrize(&(&q * &l0 * &q));
    let (l0_pinv, rank) = pinv(&restricted, PINV_CUTOFF);
    let target = (m - 1) * (m + 2) / 2;
    if rank < target {
        return Err(GsError::Degeneracy(format!(
            "QL0Q has rank {rank} on a tangent space of dimension {target}"
        )));
    }
    let sigma_inf = symmetrize(&(&l0_pinv * &sigma2 * l0_pinv.transpose()));
    Ok(CltLimit { sigma2, sigma0, l0, q, l0_pinv, sigma_inf })
}

pub fn sigma_infinity<M: MeasureLike + ?Sized>(
    meas: &M,
    sigma_p: &ScatterMatrix,
    mc: Option<&McSpec>,
) -> Result<DMatrix<f64>> {
    Ok(clt_limit(meas, sigma_p, mc)?.sigma_inf)
}

/// Quantile with linear interpolation between order statistics of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Least-squares slope of y on x.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn replicate_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

fn check_sizes(m: usize, r: usize, ns: &[usize], reps: usize) -> Result<()> {
    if r == 0 || r >= m {
        return Err(GsError::Usage(format!("r = {r} not in 1..{m}")));
    }
    if reps == 0 {
        return Err(GsError::Usage("reps must be positive".into()));
    }
    if let Some(n) = ns.iter().find(|&&n| n * r <= m) {
        return Err(GsError::Usage(format!("n = {n} violates n·r > m")));
    }
    let mut sorted = ns.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(GsError::Usage("sample sizes in the grid must be distinct".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct LlnRow {
    pub n: usize,
    pub rep: usize,
    /// distance(Σ_n, Σ*), absent when the solver failed.
    pub distance: Option<f64>,
    pub status: String,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct LlnSummary {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct LlnTable {
    pub rows: Vec<LlnRow>,
    pub summary: Vec<LlnSummary>,
    /// Least-squares slope of log median distance against log n.
    pub loglog_slope: f64,
    pub monotone: bool,
    pub warnings: Vec<String>,
}

fn status_name(res: &Result<crate::estimator::GEResult>) -> String {
    match res {
        Ok(r) => match &r.status {
            crate::estimator::SolverStatus::Converged => "Converged".into(),
            crate::estimator::SolverStatus::DivergedToBoundary { .. } => "DivergedToBoundary".into(),
            crate::estimator::SolverStatus::MaxIterations => "MaxIterations".into(),
        },
        Err(e) => format!("Error: {e}"),
    }
}

/// For each n in the grid and each replicate, draws n points from 𝔾_Σ*, solves
/// for the GE from Id and records distance(Σ_n, Σ*). Replicate `rep` uses the
/// same stream for every n.
pub fn lln_experiment(
    sigma_star: &ScatterMatrix,
    r: usize,
    n_grid: &[usize],
    reps: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<LlnTable> {
    let m = sigma_star.dim();
    check_sizes(m, r, n_grid, reps)?;
    let cells: Vec<(usize, usize)> = n_grid.iter().flat_map(|&n| (0..reps).map(move |rep| (n, rep))).collect();
    let rows: Vec<LlnRow> = cells
        .into_par_iter()
        .map(|(n, rep)| {
            let mut rng = replicate_rng(seed, rep);
            let res = gaussian_sample(sigma_star, r, n, &mut rng)
                .and_then(|meas| solve(&meas, &ScatterMatrix::identity(m), opts));
            let status = status_name(&res);
            let (distance, iterations) = match &res {
                Ok(g) if g.status.is_converged() => (Some(distance(&g.estimate, sigma_star)), g.iterations),
                Ok(g) => (None, g.iterations),
                Err(_) => (None, 0),
            };
            LlnRow { n, rep, distance, status, iterations }
        })
        .collect();
    let mut summary = Vec::new();
    for &n in n_grid {
        let mut d: Vec<f64> = rows.iter().filter(|row| row.n == n).filter_map(|row| row.distance).collect();
        d.sort_by(f64::total_cmp);
        summary.push(LlnSummary {
            n,
            median: quantile(&d, 0.5),
            q1: quantile(&d, 0.25),
            q3: quantile(&d, 0.75),
            failures: reps - d.len(),
        });
    }
    let x: Vec<f64> = summary.iter().map(|s| (s.n as f64).ln()).collect();
    let y: Vec<f64> = summary.iter().map(|s| s.median.ln()).collect();
    let loglog_slope = if summary.len() >= 2 { ols_slope(&x, &y) } else { f64::NAN };
    let mut order: Vec<&LlnSummary> = summary.iter().collect();
    order.sort_by_key(|s| s.n);
    let monotone = order.windows(2).all(|w| w[1].median < w[0].median);
    let mut warnings = Vec::new();
    if !monotone {
        warnings.push("WARN: median distance is not strictly decreasing in n".to_string());
    }
    let failures: usize = summary.iter().map(|s| s.failures).sum();
    if failures > 0 {
        warnings.push(format!("WARN: {failures} replicate(s) did not converge"));
    }
    Ok(LlnTable { rows, summary, loglog_slope, monotone, warnings })
}

#[derive(Clone, Debug, Serialize)]
pub struct CltRow {
    pub rep: usize,
    pub status: String,
    pub residual: f64,
    /// √n·vec(C_n − Id), empty when the solver failed.
    pub z: Vec<f64>,
}

/// Sample moments and the Jarque–Bera statistic of one coordinate of √n·vec(C_n − Id).
#[derive(Clone, Debug, Serialize)]
pub struct CoordinateStats {
    /// Row and column (0-based) of the matrix entry.
    pub entry: (usize, usize),
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub jarque_bera: f64,
    /// Asymptotic χ²₂ p-value exp(−JB/2).
    pub p_value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CltReport {
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    #[serde(serialize_with = "serialize_rows")]
    pub empirical_cov: DMatrix<f64>,
    #[serde(serialize_with = "serialize_rows")]
    pub sigma_inf: DMatrix<f64>,
    pub rel_frobenius_error: f64,
    pub normality_pvalues: Vec<CoordinateStats>,
    pub low_power: bool,
    /// ‖Ĉ·vec(Id)‖/‖vec(Id)‖.
    pub identity_leak: f64,
    /// Operator norm of Ĉ on vectorized antisymmetric matrices.
    pub antisymmetric_leak: f64,
    /// Relative Frobenius distance between L₀ĈL₀ᵀ and σ².
    pub linear_relation_error: f64,
    pub flags: Vec<String>,
    #[serde(skip)]
    pub rows: Vec<CltRow>,
}

fn coordinate_stats(values: &[f64], entry: (usize, usize)) -> CoordinateStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let central = |k: i32| values.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n;
    let (m2, m3, m4) = (central(2), central(3), central(4));
    let skewness = m3 / m2.powf(1.5);
    let excess_kurtosis = m4 / (m2 * m2) - 3.0;
    let jarque_bera = n / 6.0 * (skewness * skewness + excess_kurtosis * excess_kurtosis / 4.0);
    CoordinateStats {
        entry,
        mean,
        variance: m2 * n / (n - 1.0),
        skewness,
        excess_kurtosis,
        jarque_bera,
        p_value: (-jarque_bera / 2.0).exp(),
    }
}

/// Unbiased sample covariance of the rows of `z`.
fn sample_covariance(z: &[Vec<f64>], dim: usize) -> DMatrix<f64> {
    let n = z.len() as f64;
    let mut mean = DVector::zeros(dim);
    for row in z {
        mean += DVector::from_column_slice(row);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for row in z {
        let d = DVector::from_column_slice(row) - &mean;
        cov += &d * d.transpose();
    }
    symmetrize(&(cov / (n - 1.0)))
}

/// Replicates √n·vec(C_n − Id) for samples of size n from 𝔾_Σ* and compares
/// their covariance with σ∞², evaluated by Monte Carlo with `mc`.
pub fn clt_experiment(
    sigma_star: &ScatterMatrix,
    r: usize,
    n: usize,
    reps: usize,
    seed: u64,
    opts: &SolverOptions,
    mc: &McSpec,
) -> Result<CltReport> {
    let m = sigma_star.dim();
    check_sizes(m, r, &[n], reps)?;
    let rows: Vec<CltRow> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(seed, rep);
            let res = gaussian_sample(sigma_star, r, n, &mut rng)
                .and_then(|meas| solve(&meas, &ScatterMatrix::identity(m), opts));
            let status = status_name(&res);
            match res {
                Ok(g) if g.status.is_converged() => {
                    let mut c = c_n(&g.estimate, sigma_star).expect("dimensions agree");
                    for i in 0..m {
                        c[(i, i)] -= 1.0;
                    }
                    let z = (vec(&c) * (n as f64).sqrt()).as_slice().to_vec();
                    CltRow { rep, status, residual: g.residual, z }
                }
                Ok(g) => CltRow { rep, status, residual: g.residual, z: Vec::new() },
                Err(_) => CltRow { rep, status, residual: f64::NAN, z: Vec::new() },
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = rows.iter().filter(|row| !row.z.is_empty()).map(|row| row.z.clone()).collect();
    let failures = reps - z.len();
    if z.len() < 2 {
        return Err(GsError::Degeneracy("fewer than two replicates converged".into()));
    }
    let mm = m * m;
    let empirical_cov = sample_covariance(&z, mm);
    let gaussian = Measure::Gaussian { sigma: sigma_star.clone(), r };
    let limit = clt_limit(&gaussian, sigma_star, Some(mc))?;
    let rel_frobenius_error = (&empirical_cov - &limit.sigma_inf).norm() / limit.sigma_inf.norm();
    let mut normality_pvalues = Vec::new();
    for j in 0..m {
        for i in 0..m {
            let k = i + j * m;
            let values: Vec<f64> = z.iter().map(|row| row[k]).collect();
            normality_pvalues.push(coordinate_stats(&values, (i, j)));
        }
    }
    let id = vec(&DMatrix::identity(m, m));
    let identity_leak = (&empirical_cov * &id).norm() / id.norm();
    let anti = (DMatrix::identity(mm, mm) - commutation(m)) * 0.5;
    let antisymmetric_leak = (&empirical_cov * anti).svd(false, false).singular_values.max();
    let linear = &limit.l0 * &empirical_cov * limit.l0.transpose();
    let linear_relation_error = (&linear - &limit.sigma2).norm() / limit.sigma2.norm();
    let low_power = z.len() < LOW_POWER_REPS;
    let mut flags = Vec::new();
    if low_power {
        flags.push(format!("LOW_POWER: {} converged replicates (< {LOW_POWER_REPS})", z.len()));
    }
    if failures > 0 {
        flags.push(format!("WARN: {failures} replicate(s) did not converge"));
    }
    Ok(CltReport {
        n,
        reps,
        failures,
        empirical_cov,
        sigma_inf: limit.sigma_inf,
        rel_frobenius_error,
        normality_pvalues,
        low_power,
        identity_leak,
        antisymmetric_leak,
        linear_relation_error,
        flags,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grassmann::{EmpiricalMeasure, SubspacePoint};
    use crate::manifold::random_scatter;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn gauss(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal))
    }

    fn line(theta: f64) -> SubspacePoint {
        SubspacePoint::new(DMatrix::from_column_slice(2, 1, &[theta.cos(), theta.sin()])).unwrap()
    }

    /// Lines at angles kπ/8: all trigonometric moments of order ≤ 4 match the uniform law.
    fn equispaced_lines() -> EmpiricalMeasure {
        EmpiricalMeasure::uniform((0..8).map(|k| line(k as f64 * std::f64::consts::PI / 8.0)).collect()).unwrap()
    }

    #[test]
    fn vec_of_product_is_kronecker() {
        let mut g = rng(1);
        let (a, x, b) = (gauss(3, 3, &mut g), gauss(3, 3, &mut g), gauss(3, 3, &mut g));
        let lhs = vec(&(&a * &x * &b));
        let rhs = kron(&b.transpose(), &a) * vec(&x);
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        assert_eq!(unvec(&vec(&x), 3).unwrap(), x);
        assert!(matches!(unvec(&vec(&x), 2), Err(GsError::Usage(_))));
    }

    #[test]
    fn commutation_transposes() {
        let x = gauss(4, 4, &mut rng(2));
        assert_eq!(commutation(4) * vec(&x), vec(&x.transpose()));
    }

    #[test]
    fn q_projects_onto_symmetric_trace_zero() {
        for m in 2..=4 {
            let q = q_projector(m);
            assert_relative_eq!(&q * &q, q.clone(), epsilon = 1e-12);
            assert_relative_eq!(q.transpose(), q.clone(), epsilon = 1e-12);
            assert_relative_eq!(q.trace(), ((m - 1) * (m + 2) / 2) as f64, epsilon = 1e-12);
            let x = gauss(m, m, &mut rng(m as u64));
            let image = unvec(&(&q * vec(&x)), m).unwrap();
            assert_relative_eq!(image.transpose(), image.clone(), epsilon = 1e-12);
            assert!(image.trace().abs() < 1e-12);
            let anti = &x - x.transpose();
            assert!((&q * vec(&anti)).norm() < 1e-12);
        }
    }

    #[test]
    fn hand_oracle_uniform_lines_in_the_plane() {
        let meas = equispaced_lines();
        let id = ScatterMatrix::identity(2);
        let limit = clt_limit(&meas, &id, None).unwrap();
        let q = q_projector(2);
        assert_relative_eq!(limit.sigma2, &q / 4.0, epsilon = 1e-12);
        assert_relative_eq!(&limit.q * &limit.l0 * &limit.q, &q / 4.0, epsilon = 1e-12);
        assert_relative_eq!(limit.sigma_inf, &q * 4.0, epsilon = 1e-10);
    }

    #[test]
    fn monte_carlo_limit_matches_exact() {
        let gaussian = Measure::Gaussian { sigma: ScatterMatrix::identity(2), r: 1 };
        let mc = McSpec { draws: 20_000, seed: 3 };
        let approx = sigma_infinity(&gaussian, &ScatterMatrix::identity(2), Some(&mc)).unwrap();
        let exact = q_projector(2) * 4.0;
        assert!((&approx - &exact).norm() / exact.norm() < 0.05);
    }

    #[test]
    fn moment_identities() {
        let sigma = random_scatter(3, 0.5, &mut rng(4));
        let gaussian = Measure::Gaussian { sigma: sigma.clone(), r: 2 };
        let mc = McSpec { draws: 2000, seed: 5 };
        let (s2, s0) = clt_moments(&gaussian, &sigma, Some(&mc)).unwrap();
        assert_relative_eq!(s0.trace(), 4.0, epsilon = 1e-9);
        let id = vec(&DMatrix::identity(3, 3));
        assert!((&s2 * &id).norm() < 1e-10);
        let anti = (DMatrix::identity(9, 9) - commutation(3)) * 0.5;
        assert!((&s2 * anti).norm() < 1e-10);
        let eig = s2.symmetric_eigen();
        let top = eig.eigenvalues.max();
        let rank = eig.eigenvalues.iter().filter(|&&l| l > 1e-10 * top).count();
        assert_eq!(rank, 5);
    }

    #[test]
    fn analytic_q_matches_eigenprojector() {
        let gaussian = Measure::Gaussian { sigma: ScatterMatrix::identity(3), r: 1 };
        let mc = McSpec { draws: 100_000, seed: 12 };
        let s2 = sigma2(&gaussian, &ScatterMatrix::identity(3), Some(&mc)).unwrap();
        let eig = s2.clone().symmetric_eigen();
        let top = eig.eigenvalues.max();
        assert_eq!(eig.eigenvalues.iter().filter(|&&l| l > 1e-6 * top).count(), 5);
        assert_relative_eq!(eigen_projector(&s2, 1e-6), q_projector(3), epsilon = 1e-6);
        let limit = clt_limit(&gaussian, &ScatterMatrix::identity(3), Some(&McSpec { draws: 5000, seed: 12 })).unwrap();
        let restricted = &limit.q * &limit.l0 * &limit.q;
        assert_relative_eq!(&limit.l0_pinv * restricted, limit.q, epsilon = 1e-8);
    }

    #[test]
    fn single_atom_sigma0() {
        let u = SubspacePoint::coordinate(3, &[0, 1]).unwrap();
        let meas = EmpiricalMeasure::uniform(vec![u]).unwrap();
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0]));
        assert_relative_eq!(sigma0(&meas, &ScatterMatrix::identity(3), None).unwrap(), kron(&p, &p), epsilon = 1e-14);
    }

    #[test]
    fn c_n_of_diagonal() {
        let a: f64 = 3.0;
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![a, 1.0 / a]));
        let c = c_n(&ScatterMatrix::new(d.clone()).unwrap(), &ScatterMatrix::identity(2)).unwrap();
        assert_relative_eq!(c, d * (2.0 / (a + 1.0 / a)), epsilon = 1e-14);
    }

    #[test]
    fn vec_pairing_is_trace() {
        let mut g = rng(13);
        let x = gauss(3, 3, &mut g);
        let y = gauss(3, 3, &mut g);
        let (a, b) = (&x + x.transpose(), &y + y.transpose());
        assert_relative_eq!(vec(&a).dot(&vec(&b)), (&a * &b).trace(), epsilon = 1e-12);
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(kron(&id, &id) * vec(&id), vec(&id));
    }

    #[test]
    fn single_large_sample_is_close() {
        let sigma = random_scatter(3, 0.5, &mut rng(14));
        let table = lln_experiment(&sigma, 2, &[10_000], 1, 15, &SolverOptions::default()).unwrap();
        assert!(table.summary[0].median < 0.05, "{}", table.summary[0].median);
    }

    #[test]
    fn limit_inverts_the_linear_relation() {
        let meas = equispaced_lines();
        let limit = clt_limit(&meas, &ScatterMatrix::identity(2), None).unwrap();
        let back = &limit.l0 * &limit.sigma_inf * limit.l0.transpose();
        assert_relative_eq!(back, limit.sigma2, epsilon = 1e-10);
    }

    #[test]
    fn orthogonal_lines_are_degenerate() {
        let meas = EmpiricalMeasure::uniform(vec![line(0.0), line(std::f64::consts::FRAC_PI_2)]).unwrap();
        let err = sigma_infinity(&meas, &ScatterMatrix::identity(2), None).unwrap_err();
        assert!(matches!(err, GsError::Degeneracy(_)));
    }

    #[test]
    fn c_n_normalizes_trace() {
        let mut g = rng(6);
        let a = random_scatter(3, 0.7, &mut g);
        let b = random_scatter(3, 0.7, &mut g);
        assert_relative_eq!(c_n(&a, &a).unwrap(), DMatrix::identity(3, 3), epsilon = 1e-10);
        let c = c_n(&a, &b).unwrap();
        assert_relative_eq!(c.trace(), 3.0, epsilon = 1e-12);
        let id = ScatterMatrix::identity(3);
        assert_relative_eq!(c_n(&a, &id).unwrap(), a.matrix() * (3.0 / a.matrix().trace()), epsilon = 1e-12);
        assert!(c_n(&a, &ScatterMatrix::identity(2)).is_err());
    }

    #[test]
    fn pseudo_inverse_conditions() {
        let mut g = rng(7);
        let x = gauss(5, 3, &mut g);
        let a = &x * x.transpose();
        let (p, rank) = pinv(&a, PINV_CUTOFF);
        assert_eq!(rank, 3);
        assert_relative_eq!(&a * &p * &a, a.clone(), epsilon = 1e-9);
        assert_relative_eq!(&p * &a * &p, p.clone(), epsilon = 1e-9);
        assert_relative_eq!(eigen_projector(&a, PINV_CUTOFF), &a * &p, epsilon = 1e-9);
    }

    #[test]
    fn order_statistics() {
        let d = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(quantile(&d, 0.5), 2.5);
        assert_relative_eq!(quantile(&d, 0.25), 1.75);
        assert_relative_eq!(quantile(&d, 0.75), 3.25);
        assert!(quantile(&[], 0.5).is_nan());
        assert_relative_eq!(ols_slope(&[1.0, 2.0, 3.0], &[1.0, 0.5, 0.0]), -0.5);
    }

    #[test]
    fn jarque_bera_of_symmetric_sample() {
        let v = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let s = coordinate_stats(&v, (0, 0));
        assert_relative_eq!(s.skewness, 0.0);
        assert_relative_eq!(s.variance, 2.5);
        assert_relative_eq!(s.excess_kurtosis, 1.7 - 3.0, epsilon = 1e-12);
        assert_relative_eq!(s.p_value, (-s.jarque_bera / 2.0).exp());
    }

    #[test]
    fn lln_is_deterministic_and_checks_sizes() {
        let sigma = random_scatter(2, 0.5, &mut rng(8));
        let opts = SolverOptions::default();
        let a = lln_experiment(&sigma, 1, &[10, 40], 6, 9, &opts).unwrap();
        let b = lln_experiment(&sigma, 1, &[10, 40], 6, 9, &opts).unwrap();
        assert_eq!(a.rows.len(), 12);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.distance, y.distance);
        }
        assert!(a.summary.iter().all(|s| s.failures == 0));
        assert!(a.summary[1].median < a.summary[0].median);
        assert!(matches!(lln_experiment(&sigma, 1, &[2], 3, 0, &opts), Err(GsError::Usage(_))));
        assert!(matches!(lln_experiment(&sigma, 2, &[10], 3, 0, &opts), Err(GsError::Usage(_))));
        assert!(matches!(lln_experiment(&sigma, 1, &[10, 10], 3, 0, &opts), Err(GsError::Usage(_))));
    }

    #[test]
    fn clt_small_run() {
        let sigma = ScatterMatrix::identity(2);
        let mc = McSpec { draws: 2000, seed: 1 };
        let opts = SolverOptions::default();
        let a = clt_experiment(&sigma, 1, 40, 30, 11, &opts, &mc).unwrap();
        let b = clt_experiment(&sigma, 1, 40, 30, 11, &opts, &mc).unwrap();
        assert!(a.low_power);
        assert!(a.flags.iter().any(|f| f.starts_with("LOW_POWER")));
        assert_eq!(a.normality_pvalues.len(), 4);
        assert_eq!(a.empirical_cov, b.empirical_cov);
        assert!(a.identity_leak < 1e-8);
        assert!(a.antisymmetric_leak < 1e-8);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn matrix(m: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-3.0..3.0f64, m * m).prop_map(move |v| DMatrix::from_vec(m, m, v))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn vec_unvec_roundtrip(a in matrix(3)) {
            prop_assert_eq!(unvec(&vec(&a), 3).unwrap(), a);
        }

        #[test]
        fn vec_kron_identity(a in matrix(2), x in matrix(2), b in matrix(2)) {
            let lhs = vec(&(&a * &x * &b));
            let rhs = kron(&b.transpose(), &a) * vec(&x);
            prop_assert!((lhs - rhs).norm() < 1e-10);
        }

        #[test]
        fn pinv_is_symmetric_for_symmetric_input(a in matrix(3)) {
            let s = &a * a.transpose();
            let (p, _) = pinv(&s, PINV_CUTOFF);
            prop_assert!((&p - p.transpose()).norm() <= 1e-8 * (1.0 + p.norm()));
        }
    }
}
