//! The negative log-likelihood ℓ_P, its Riemannian gradient and covariant
//! Hessian, the M-functional M(Γ) and the squared gradient norm h(Γ).
//!
//! Sums over atoms go through [`AtomBank`], a flat cache of orthonormal atom
//! bases with allocation-free per-atom kernels. Atoms are summed in their
//! stored order, so results are bit-stable.

use std::borrow::Cow;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{GsError, Result};
use crate::grassmann::{log_gram_ratio, pi_with_inverse, EmpiricalMeasure, McSpec, Measure, SubspacePoint};
use crate::manifold::{inner_raw, sym_sqrt, symmetrize, tangent_project, ScatterMatrix, TangentVector};

/// Anything that can be turned into an empirical measure for evaluation.
pub trait MeasureLike {
    fn resolve_empirical(&self, mc: Option<&McSpec>) -> Result<Cow<'_, EmpiricalMeasure>>;
    /// Whether evaluation is a Monte Carlo estimate.
    fn is_monte_carlo(&self) -> bool;
}

impl MeasureLike for EmpiricalMeasure {
    fn resolve_empirical(&self, _mc: Option<&McSpec>) -> Result<Cow<'_, EmpiricalMeasure>> {
        Ok(Cow::Borrowed(self))
    }
    fn is_monte_carlo(&self) -> bool {
        false
    }
}

impl MeasureLike for Measure {
    fn resolve_empirical(&self, mc: Option<&McSpec>) -> Result<Cow<'_, EmpiricalMeasure>> {
        self.resolve(mc)
    }
    fn is_monte_carlo(&self) -> bool {
        self.is_gaussian()
    }
}

/// A scalar functional value; `std_err` is set for Monte Carlo estimates.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ScalarEstimate {
    pub value: f64,
    pub std_err: Option<f64>,
}

/// A gradient value with entrywise standard errors for Monte Carlo estimates.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    pub value: TangentVector,
    pub std_err: Option<DMatrix<f64>>,
}

/// M(Γ), symmetric PSD with trace r.
#[derive(Clone, Debug)]
pub struct MFunctionalValue {
    pub m: DMatrix<f64>,
}

impl MFunctionalValue {
    pub fn trace_sq(&self) -> f64 {
        self.m.component_mul(&self.m).sum()
    }
}

fn check_dim(m: usize, sigma: &ScatterMatrix) -> Result<()> {
    if m != sigma.dim() {
        return Err(GsError::Usage(format!("measure lives in ℝ^{m} but Σ is {0}x{0}", sigma.dim())));
    }
    Ok(())
}

fn weighted_scalar(meas: &EmpiricalMeasure, mc: bool, f: impl Fn(&SubspacePoint) -> Result<f64>) -> Result<ScalarEstimate> {
    let mut mean = 0.0;
    let mut vals = Vec::with_capacity(if mc { meas.len() } else { 0 });
    for (p, w) in meas.iter() {
        let v = f(p)?;
        mean += w * v;
        if mc {
            vals.push(v);
        }
    }
    let std_err = mc.then(|| {
        let n = vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (var / n).sqrt()
    });
    Ok(ScalarEstimate { value: mean, std_err })
}

/// ℓ_U(Σ) = ½·log(det(XᵀΣ⁻¹X)/det(XᵀX)).
pub fn loglik_point(u: &SubspacePoint, sigma: &ScatterMatrix) -> Result<f64> {
    Ok(0.5 * log_gram_ratio(u, sigma)?)
}

/// ℓ_P(Σ) = ∫ ℓ_U(Σ) dP(U).
pub fn loglik<M: MeasureLike + ?Sized>(meas: &M, sigma: &ScatterMatrix, mc: Option<&McSpec>) -> Result<ScalarEstimate> {
    let e = meas.resolve_empirical(mc)?;
    check_dim(e.m(), sigma)?;
    weighted_scalar(&e, meas.is_monte_carlo(), |u| loglik_point(u, sigma))
}

/// grad ℓ_U(Σ) = (r/2m)Σ − ½X(XᵀΣ⁻¹X)⁻¹Xᵀ.
pub fn grad_point(u: &SubspacePoint, sigma: &ScatterMatrix) -> Result<TangentVector> {
    check_dim(u.m(), sigma)?;
    let (m, r) = (u.m() as f64, u.r() as f64);
    let pi = pi_with_inverse(u, &sigma.inverse())?;
    let s = sigma.matrix() * pi * sigma.matrix();
    tangent_project(sigma, &(sigma.matrix() * (r / (2.0 * m)) - s * 0.5))
}

/// grad ℓ_P(Σ) = ∫ grad ℓ_U(Σ) dP(U).
pub fn grad<M: MeasureLike + ?Sized>(meas: &M, sigma: &ScatterMatrix, mc: Option<&McSpec>) -> Result<GradientEstimate> {
    let e = meas.resolve_empirical(mc)?;
    check_dim(e.m(), sigma)?;
    let (m, r) = (e.m() as f64, e.r() as f64);
    let bank = AtomBank::new(&e);
    let si = sigma.inverse();
    let s = bank.weighted_sum(&si)?;
    let value = tangent_project(sigma, &(sigma.matrix() * (r / (2.0 * m)) - &s * 0.5))?;
    let std_err = if meas.is_monte_carlo() {
        let n = e.len() as f64;
        let mut sq = DMatrix::<f64>::zeros(e.m(), e.m());
        for (p, _) in e.iter() {
            let d = grad_point(p, sigma)?.into_matrix() - value.matrix();
            sq += d.component_mul(&d);
        }
        Some((sq / ((n - 1.0).max(1.0) * n)).map(f64::sqrt))
    } else {
        None
    };
    Ok(GradientEstimate { value, std_err })
}

/// ∇_Z grad ℓ_U(Σ) = ¼Zπ_UΣ + ¼Σπ_UZ − ½Σπ_UZπ_UΣ.
pub fn covariant_deriv_grad(u: &SubspacePoint, sigma: &ScatterMatrix, z: &TangentVector) -> Result<TangentVector> {
    check_dim(u.m(), sigma)?;
    let pi = pi_with_inverse(u, &sigma.inverse())?;
    let s = sigma.matrix();
    let zm = z.matrix();
    let a = zm * &pi * s;
    let out = (&a + a.transpose()) * 0.25 - s * &pi * zm * &pi * s * 0.5;
    tangent_project(sigma, &out)
}

/// ⟨∇_Z grad ℓ_P(Σ), Z⟩_Σ.
pub fn hess_quadform<M: MeasureLike + ?Sized>(
    meas: &M,
    sigma: &ScatterMatrix,
    z: &TangentVector,
    mc: Option<&McSpec>,
) -> Result<ScalarEstimate> {
    let e = meas.resolve_empirical(mc)?;
    check_dim(e.m(), sigma)?;
    let si = sigma.inverse();
    weighted_scalar(&e, meas.is_monte_carlo(), |u| {
        let d = covariant_deriv_grad(u, sigma, z)?;
        Ok(inner_raw(&si, d.matrix(), z.matrix()))
    })
}

/// M(Γ) = Σ_j w_j g⁻¹X_j(X_jᵀΓ⁻¹X_j)⁻¹X_jᵀg⁻¹ with g = Γ^{1/2}.
pub fn m_matrix<M: MeasureLike + ?Sized>(meas: &M, gamma: &ScatterMatrix, mc: Option<&McSpec>) -> Result<MFunctionalValue> {
    let e = meas.resolve_empirical(mc)?;
    check_dim(e.m(), gamma)?;
    let s = AtomBank::new(&e).weighted_sum(&gamma.inverse())?;
    let root = sym_sqrt(gamma);
    Ok(MFunctionalValue { m: symmetrize(&(&root.g_inv * s * &root.g_inv)) })
}

/// h(Γ) = ⟨grad ℓ_P(Γ), grad ℓ_P(Γ)⟩_Γ = ¼(tr(M²) − r²/m).
pub fn h_value<M: MeasureLike + ?Sized>(meas: &M, gamma: &ScatterMatrix, mc: Option<&McSpec>) -> Result<f64> {
    let e = meas.resolve_empirical(mc)?;
    check_dim(e.m(), gamma)?;
    Ok(0.25 * AtomBank::new(&e).residual(&gamma.inverse())?)
}

/// grad h_n(Γ) = (1/2n²)Γ(Σ_j π_jΓ(Σ_i π_i)Γπ_j)Γ − (1/2n²)Γ(Σ_i π_i)Γ(Σ_i π_i)Γ
/// for a uniform-weight empirical measure.
pub fn grad_h(meas: &EmpiricalMeasure, gamma: &ScatterMatrix) -> Result<TangentVector> {
    check_dim(meas.m(), gamma)?;
    if !meas.is_uniform() {
        return Err(GsError::Usage("grad_h requires uniform weights".into()));
    }
    let n = meas.len() as f64;
    let gi = gamma.inverse();
    let g = gamma.matrix();
    let pis = meas.points().iter().map(|p| pi_with_inverse(p, &gi)).collect::<Result<Vec<_>>>()?;
    let mut total = DMatrix::<f64>::zeros(meas.m(), meas.m());
    for p in &pis {
        total += p;
    }
    let mid = g * &total * g;
    let mut inner_sum = DMatrix::<f64>::zeros(meas.m(), meas.m());
    for p in &pis {
        inner_sum += p * &mid * p;
    }
    let out = (g * inner_sum * g - g * &total * &mid) / (2.0 * n * n);
    tangent_project(gamma, &out)
}

/// Flat cache of orthonormal atom bases for repeated sums over an empirical measure.
#[derive(Clone, Debug)]
pub struct AtomBank {
    m: usize,
    r: usize,
    /// Atom j occupies q[j*m*r .. (j+1)*m*r], column-major m×r.
    q: Vec<f64>,
    w: Vec<f64>,
}

impl AtomBank {
    pub fn new(meas: &EmpiricalMeasure) -> Self {
        let (m, r) = (meas.m(), meas.r());
        let mut q = Vec::with_capacity(meas.len() * m * r);
        for p in meas.points() {
            q.extend(p.orthonormal().iter().copied());
        }
        Self { m, r, q, w: meas.weights().to_vec() }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// S = Σ_j w_j Q_j(Q_jᵀAQ_j)⁻¹Q_jᵀ; with A = Σ⁻¹ this is g·M(Σ)·g for g = Σ^{1/2}.
    pub fn weighted_sum(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (m, r) = (self.m, self.r);
        let mut s = vec![0.0; m * m];
        let mut b = vec![0.0; m * r];
        let mut k = vec![0.0; r * r];
        let mut c = vec![0.0; m * r];
        let a = a.as_slice();
        for (j, &wj) in self.w.iter().enumerate() {
            if wj == 0.0 {
                continue;
            }
            let qj = &self.q[j * m * r..(j + 1) * m * r];
            if r == 1 {
                let mut kk = 0.0;
                for col in 0..m {
                    let mut acc = 0.0;
                    for row in 0..m {
                        acc += a[col * m + row] * qj[row];
                    }
                    kk += qj[col] * acc;
                }
                if !(kk > 0.0) || !kk.is_finite() {
                    return Err(GsError::Domain("XᵀΣ⁻¹X is not positive definite".into()));
                }
                let f = wj / kk;
                for col in 0..m {
                    let fc = f * qj[col];
                    for row in 0..=col {
                        s[col * m + row] += fc * qj[row];
                    }
                }
                continue;
            }
            // B = A·Q (m×r), K = Qᵀ·B (r×r).
            for t in 0..r {
                for row in 0..m {
                    let mut acc = 0.0;
                    for l in 0..m {
                        acc += a[l * m + row] * qj[t * m + l];
                    }
                    b[t * m + row] = acc;
                }
            }
            for t in 0..r {
                for u in 0..=t {
                    let mut acc = 0.0;
                    for row in 0..m {
                        acc += qj[t * m + row] * b[u * m + row];
                    }
                    k[u * r + t] = acc;
                    k[t * r + u] = acc;
                }
            }
            cholesky_in_place(&mut k, r)?;
            // C = Q·L⁻ᵀ: each row c_i solves L c_iᵀ = q_iᵀ.
            for row in 0..m {
                for t in 0..r {
                    let mut acc = qj[t * m + row];
                    for u in 0..t {
                        acc -= k[u * r + t] * c[u * m + row];
                    }
                    c[t * m + row] = acc / k[t * r + t];
                }
            }
            for col in 0..m {
                for row in 0..=col {
                    let mut acc = 0.0;
                    for t in 0..r {
                        acc += c[t * m + row] * c[t * m + col];
                    }
                    s[col * m + row] += wj * acc;
                }
            }
        }
        let mut out = DMatrix::from_vec(m, m, s);
        for col in 0..m {
            for row in col + 1..m {
                out[(row, col)] = out[(col, row)];
            }
        }
        Ok(out)
    }

    /// tr((M − (r/m)Id)²) at Σ = A⁻¹, evaluated as tr((S·A − (r/m)Id)²).
    pub fn residual(&self, sigma_inv: &DMatrix<f64>) -> Result<f64> {
        let s = self.weighted_sum(sigma_inv)?;
        Ok(residual_from_sum(&s, sigma_inv, self.r))
    }
}

pub(crate) fn residual_from_sum(s: &DMatrix<f64>, sigma_inv: &DMatrix<f64>, r: usize) -> f64 {
    let m = s.nrows();
    let mut d = s * sigma_inv;
    let c = r as f64 / m as f64;
    for i in 0..m {
        d[(i, i)] -= c;
    }
    d.component_mul(&d.transpose()).sum()
}

/// Lower Cholesky factor of a column-major r×r SPD matrix, written into its lower triangle.
fn cholesky_in_place(k: &mut [f64], r: usize) -> Result<()> {
    for j in 0..r {
        let mut d = k[j * r + j];
        for l in 0..j {
            d -= k[l * r + j] * k[l * r + j];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(GsError::Domain("XᵀΣ⁻¹X is not positive definite".into()));
        }
        let d = d.sqrt();
        k[j * r + j] = d;
        for i in j + 1..r {
            let mut v = k[j * r + i];
            for l in 0..j {
                v -= k[l * r + i] * k[l * r + j];
            }
            k[j * r + i] = v / d;
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    pub fn random_subspace(m: usize, r: usize, rng: &mut ChaCha8Rng) -> SubspacePoint {
        SubspacePoint::new(DMatrix::<f64>::from_fn(m, r, |_, _| rng.sample(StandardNormal))).unwrap()
    }

    pub fn random_empirical(m: usize, r: usize, n: usize, rng: &mut ChaCha8Rng) -> EmpiricalMeasure {
        let pts = (0..n).map(|_| random_subspace(m, r, rng)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
        let total: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let head: f64 = w[..n - 1].iter().sum();
        w[n - 1] = 1.0 - head;
        EmpiricalMeasure::new(pts, w).unwrap()
    }

    /// m=3, r=1: five lines in span(e₁, e₂) and e₃, so I(span(e₁, e₂)) = −1/6.
    pub fn escaping_instance() -> EmpiricalMeasure {
        let mut pts: Vec<SubspacePoint> = (0..5)
            .map(|k| {
                let a = k as f64 * 0.6 + 0.1;
                SubspacePoint::new(DMatrix::from_column_slice(3, 1, &[a.cos(), a.sin(), 0.0])).unwrap()
            })
            .collect();
        pts.push(SubspacePoint::coordinate(3, &[2]).unwrap());
        EmpiricalMeasure::uniform(pts).unwrap()
    }
}
