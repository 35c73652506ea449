//! Geometry of Pos¹_sym(m), the manifold of symmetric positive-definite
//! matrices with determinant one.
//!
//! The metric is ⟨A, B⟩_Σ = tr(Σ⁻¹AΣ⁻¹B). Matrix functions (square root,
//! exponential, logarithm) go through the symmetric eigendecomposition, and
//! every operation that can drift off the determinant-one slice renormalizes
//! with M ← M / det(M)^{1/m}.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GsError, Result};

/// Maximum relative asymmetry accepted for symmetric inputs.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Maximum |det − 1| accepted for a scatter matrix.
pub const DET_TOL: f64 = 1e-10;
/// Maximum |tr(Σ⁻¹V)| for a tangent vector (relative to the size of Σ⁻¹V).
pub const TANGENT_TOL: f64 = 1e-10;
/// Largest eigenvalue ratio accepted for SPD inputs.
pub const MAX_CONDITION: f64 = 1e14;

pub(crate) fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Relative asymmetry max|A − Aᵀ| / max(1, max|A|).
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / max_abs(a).max(1.0)
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues and eigenvectors of the symmetric part of `a`.
pub(crate) fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(symmetrize(a));
    (e.eigenvalues, e.eigenvectors)
}

/// Q·diag(f(λ))·Qᵀ.
pub(crate) fn sym_apply(
    vals: &DVector<f64>,
    vecs: &DMatrix<f64>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(vals[j]);
    }
    symmetrize(&(scaled * vecs.transpose()))
}

fn spd_eigen(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (vals, vecs) = sym_eigen(a);
    let lo = vals.min();
    let hi = vals.max();
    if !(lo > 0.0) || !hi.is_finite() {
        return Err(GsError::Domain(format!(
            "matrix is not positive definite (smallest eigenvalue {lo:e})"
        )));
    }
    if hi / lo > MAX_CONDITION {
        return Err(GsError::Domain(format!(
            "condition number {:e} exceeds {MAX_CONDITION:e}",
            hi / lo
        )));
    }
    Ok((vals, vecs))
}

/// Matrix exponential of a symmetric matrix.
pub fn sym_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    sym_apply(&vals, &vecs, f64::exp)
}

/// Matrix logarithm of a symmetric positive-definite matrix.
pub fn sym_log(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = spd_eigen(a)?;
    Ok(sym_apply(&vals, &vecs, f64::ln))
}

/// A point of Pos¹_sym(m).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ScatterMatrix {
    a: DMatrix<f64>,
}

impl ScatterMatrix {
    /// Validates symmetry, positive definiteness, conditioning and |det − 1| ≤ 1e-10.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        check_square(&a)?;
        let asym = asymmetry(&a);
        if asym > SYMMETRY_TOL {
            return Err(GsError::Domain(format!("matrix is not symmetric (asymmetry {asym:e})")));
        }
        let (vals, _) = spd_eigen(&a)?;
        let det: f64 = vals.iter().product();
        if (det - 1.0).abs() > DET_TOL {
            return Err(GsError::Domain(format!("determinant {det} is not 1")));
        }
        Ok(Self { a: symmetrize(&a) })
    }

    /// Symmetrizes `a`, checks positive definiteness and rescales to determinant one.
    pub fn normalized(a: DMatrix<f64>) -> Result<Self> {
        check_square(&a)?;
        let a = symmetrize(&a);
        let (vals, _) = spd_eigen(&a)?;
        Self::rescale(a, &vals)
    }

    fn rescale(a: DMatrix<f64>, vals: &DVector<f64>) -> Result<Self> {
        let m = a.nrows() as f64;
        let mean_log = vals.iter().map(|v| v.ln()).sum::<f64>() / m;
        Ok(Self { a: a * (-mean_log).exp() })
    }

    pub fn identity(m: usize) -> Self {
        Self { a: DMatrix::identity(m, m) }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.a
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let (vals, vecs) = sym_eigen(&self.a);
        sym_apply(&vals, &vecs, |x| 1.0 / x)
    }

    /// Ratio of extreme eigenvalues.
    pub fn condition(&self) -> f64 {
        let (vals, _) = sym_eigen(&self.a);
        vals.max() / vals.min()
    }

    /// Congruence A·Σ·Aᵀ followed by determinant renormalization.
    pub fn congruence(&self, a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != self.dim() || a.ncols() != self.dim() {
            return Err(GsError::Usage("congruence dimension mismatch".into()));
        }
        Self::normalized(a * &self.a * a.transpose())
    }
}

fn check_square(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(GsError::Domain(format!("matrix is {}x{}, not square", a.nrows(), a.ncols())));
    }
    if a.nrows() < 2 {
        return Err(GsError::Domain("dimension must be at least 2".into()));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(GsError::Domain("matrix has non-finite entries".into()));
    }
    Ok(())
}

impl TryFrom<Vec<Vec<f64>>> for ScatterMatrix {
    type Error = GsError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        ScatterMatrix::new(crate::io::matrix_from_rows(&rows)?)
    }
}

impl From<ScatterMatrix> for Vec<Vec<f64>> {
    fn from(s: ScatterMatrix) -> Self {
        crate::io::matrix_to_rows(&s.a)
    }
}

/// Symmetric positive-definite square root g with g·g = Σ, together with g⁻¹.
#[derive(Clone, Debug)]
pub struct SquareRoot {
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
}

/// g = QΛ^{1/2}Qᵀ from Σ = QΛQᵀ.
pub fn sym_sqrt(sigma: &ScatterMatrix) -> SquareRoot {
    let (vals, vecs) = sym_eigen(sigma.matrix());
    SquareRoot {
        g: sym_apply(&vals, &vecs, f64::sqrt),
        g_inv: sym_apply(&vals, &vecs, |x| 1.0 / x.sqrt()),
    }
}

/// A symmetric matrix V with tr(Σ⁻¹V) = 0, attached to its base point Σ.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    base: ScatterMatrix,
    v: DMatrix<f64>,
}

impl TangentVector {
    pub fn new(base: &ScatterMatrix, v: DMatrix<f64>) -> Result<Self> {
        if v.nrows() != base.dim() || v.ncols() != base.dim() {
            return Err(GsError::Usage("tangent vector dimension mismatch".into()));
        }
        let asym = asymmetry(&v);
        if asym > SYMMETRY_TOL {
            return Err(GsError::Domain(format!("tangent vector is not symmetric ({asym:e})")));
        }
        let w = base.inverse() * &v;
        let tr = w.trace();
        if tr.abs() > TANGENT_TOL * w.norm().max(1.0) {
            return Err(GsError::Domain(format!("tr(Σ⁻¹V) = {tr:e} is not zero")));
        }
        Ok(Self { base: base.clone(), v: symmetrize(&v) })
    }

    pub fn zero(base: &ScatterMatrix) -> Self {
        let m = base.dim();
        Self { base: base.clone(), v: DMatrix::zeros(m, m) }
    }

    pub fn base(&self) -> &ScatterMatrix {
        &self.base
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.v
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { base: self.base.clone(), v: &self.v * c }
    }

    pub fn add(&self, other: &TangentVector) -> Result<Self> {
        check_base(&self.base, other)?;
        Ok(Self { base: self.base.clone(), v: &self.v + &other.v })
    }
}

fn same_point(a: &ScatterMatrix, b: &ScatterMatrix) -> bool {
    a.dim() == b.dim() && max_abs(&(a.matrix() - b.matrix())) <= SYMMETRY_TOL * max_abs(a.matrix()).max(1.0)
}

fn check_base(sigma: &ScatterMatrix, v: &TangentVector) -> Result<()> {
    if same_point(sigma, &v.base) {
        Ok(())
    } else {
        Err(GsError::Usage("tangent vector is based at a different point".into()))
    }
}

/// ⟨A, B⟩_Σ = tr(Σ⁻¹AΣ⁻¹B).
pub fn inner(sigma: &ScatterMatrix, a: &TangentVector, b: &TangentVector) -> Result<f64> {
    check_base(sigma, a)?;
    check_base(sigma, b)?;
    Ok(inner_raw(&sigma.inverse(), &a.v, &b.v))
}

pub(crate) fn inner_raw(sigma_inv: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let x = sigma_inv * a;
    let y = sigma_inv * b;
    x.component_mul(&y.transpose()).sum()
}

/// √⟨V, V⟩_Σ.
pub fn norm(sigma: &ScatterMatrix, v: &TangentVector) -> Result<f64> {
    Ok(inner(sigma, v, v)?.max(0.0).sqrt())
}

/// γ(t) = g·exp(tV)·g with g = Σ^{1/2} and V = g⁻¹Wg⁻¹.
pub fn geodesic(sigma: &ScatterMatrix, w: &TangentVector, t: f64) -> Result<ScatterMatrix> {
    check_base(sigma, w)?;
    let root = sym_sqrt(sigma);
    let v = &root.g_inv * w.matrix() * &root.g_inv;
    let e = sym_exp(&(v * t));
    ScatterMatrix::normalized(&root.g * e * &root.g)
}

/// Inverse of the exponential map: the tangent W at Σ₀ with geodesic(Σ₀, W, 1) = Σ₁.
pub fn log_map(sigma0: &ScatterMatrix, sigma1: &ScatterMatrix) -> Result<TangentVector> {
    if sigma0.dim() != sigma1.dim() {
        return Err(GsError::Usage("dimension mismatch".into()));
    }
    let root = sym_sqrt(sigma0);
    let c = &root.g_inv * sigma1.matrix() * &root.g_inv;
    let l = sym_log(&c)?;
    tangent_project(sigma0, &(&root.g * l * &root.g))
}

/// ‖log(Σ₀^{-1/2}Σ₁Σ₀^{-1/2})‖_F.
pub fn distance(sigma0: &ScatterMatrix, sigma1: &ScatterMatrix) -> f64 {
    let root = sym_sqrt(sigma0);
    let c = &root.g_inv * sigma1.matrix() * &root.g_inv;
    let (vals, _) = sym_eigen(&c);
    vals.iter().map(|l| l.ln().powi(2)).sum::<f64>().sqrt()
}

/// S − (tr(Σ⁻¹S)/m)·Σ applied to the symmetric part of S.
pub fn tangent_project(sigma: &ScatterMatrix, s: &DMatrix<f64>) -> Result<TangentVector> {
    let m = sigma.dim();
    if s.nrows() != m || s.ncols() != m {
        return Err(GsError::Usage("dimension mismatch in tangent_project".into()));
    }
    let s = symmetrize(s);
    let tr = (sigma.inverse() * &s).trace();
    let v = s - sigma.matrix() * (tr / m as f64);
    Ok(TangentVector { base: sigma.clone(), v: symmetrize(&v) })
}

fn gaussian_symmetric<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DMatrix<f64> {
    let b = DMatrix::<f64>::from_fn(m, m, |_, _| rng.sample(StandardNormal));
    symmetrize(&b)
}

/// Unit-norm random tangent vector at Σ; its law is invariant under the stabilizer of Σ.
pub fn random_unit_tangent<R: Rng + ?Sized>(sigma: &ScatterMatrix, rng: &mut R) -> TangentVector {
    let m = sigma.dim();
    let root = sym_sqrt(sigma);
    loop {
        let mut b = gaussian_symmetric(m, rng);
        let tr = b.trace() / m as f64;
        for i in 0..m {
            b[(i, i)] -= tr;
        }
        let n = b.norm();
        if n > 1e-8 {
            let v = &root.g * (b / n) * &root.g;
            return TangentVector { base: sigma.clone(), v: symmetrize(&v) };
        }
    }
}

/// exp(B) for a random trace-free symmetric B with entries of standard deviation `spread`.
pub fn random_scatter<R: Rng + ?Sized>(m: usize, spread: f64, rng: &mut R) -> ScatterMatrix {
    let mut b = gaussian_symmetric(m, rng) * spread;
    let tr = b.trace() / m as f64;
    for i in 0..m {
        b[(i, i)] -= tr;
    }
    ScatterMatrix::normalized(sym_exp(&b)).expect("exponential of a symmetric matrix is SPD")
}

/// Random element of SL(m, ℝ) with Gaussian entries rescaled to determinant one.
pub fn random_sl<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DMatrix<f64> {
    loop {
        let mut a = DMatrix::<f64>::from_fn(m, m, |_, _| rng.sample(StandardNormal));
        let det = a.determinant();
        if det.abs() < 1e-3 {
            continue;
        }
        if det < 0.0 {
            a.row_mut(0).neg_mut();
        }
        return a * det.abs().powf(-1.0 / m as f64);
    }
}
