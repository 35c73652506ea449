//! Existence and uniqueness diagnostics through I_P(V), the flag
//! decomposition of a velocity, asymptotic slopes of ℓ_P along geodesics and
//! boundary flags of diverging iterations.
//!
//! Classification scans a finite lattice of candidate subspaces generated
//! from the sample (sums and intersections of atoms), so only a negative
//! answer (a witness with I < 0) is a certificate.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GsError, Result};
use crate::grassmann::{
    dim_intersection, hstack, numerical_rank, projector, proper_subspace, range_basis, subspace_intersection,
    subspace_sum, EmpiricalMeasure, SubspacePoint, RANK_TOL,
};
use crate::manifold::{distance, log_map, norm, sym_eigen, sym_sqrt, ScatterMatrix};

/// Default tolerance for sign decisions on I_P.
pub const I_TOL: f64 = 1e-9;
/// Relative eigenvalue gap below which eigenvalues share a cluster.
pub const CLUSTER_GAP: f64 = 1e-6;
/// Maximum number of candidate subspaces.
pub const MAX_CANDIDATES: usize = 5000;
/// Maximum number of pairwise sum or intersection evaluations during generation.
pub const MAX_PAIR_EVALS: usize = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Provenance {
    SampleSum,
    SampleIntersection,
    EigenFlag,
    UserSupplied,
}

#[derive(Clone, Debug, Serialize)]
pub struct SubspaceCandidate {
    #[serde(rename = "V")]
    pub v: SubspacePoint,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Serialize)]
pub struct CandidateSet {
    pub candidates: Vec<SubspaceCandidate>,
    /// Generation stopped at a cap, so the scan is partial even relative to the lattice.
    pub capped: bool,
}

/// A scanned candidate together with its I_P value.
#[derive(Clone, Debug, Serialize)]
pub struct ScoredCandidate {
    #[serde(flatten)]
    pub candidate: SubspaceCandidate,
    pub dim: usize,
    pub i_value: f64,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind")]
pub enum Verdict {
    Unique,
    NoGE { witness: ScoredCandidate },
    Limit { zeros: Vec<ScoredCandidate>, complement_ok: bool },
    Inconclusive,
}

impl Verdict {
    /// Exit code contract: Unique 0, Limit 1, NoGE 2, Inconclusive 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::Unique => 0,
            Verdict::Limit { .. } => 1,
            Verdict::NoGE { .. } => 2,
            Verdict::Inconclusive => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Unique => "Unique",
            Verdict::NoGE { .. } => "NoGE",
            Verdict::Limit { .. } => "Limit",
            Verdict::Inconclusive => "Inconclusive",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExistenceReport {
    pub verdict: Verdict,
    pub scanned: usize,
    #[serde(rename = "min_I")]
    pub min_i: f64,
    pub capped: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlagPair {
    pub alpha: f64,
    #[serde(rename = "V")]
    pub v: SubspacePoint,
}

/// Nested subspaces V₁ ⊂ … ⊂ V_s with positive gaps α_k.
#[derive(Clone, Debug, Default, Serialize)]
pub struct VelocityFlag {
    pub pairs: Vec<FlagPair>,
}

impl VelocityFlag {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Σ_k α_k(Pr(V_k, Σ) − (dim V_k/m)·Id).
    pub fn reconstruct(&self, sigma: &ScatterMatrix) -> Result<DMatrix<f64>> {
        let m = sigma.dim();
        let mut w = DMatrix::zeros(m, m);
        for pair in &self.pairs {
            let mut p = projector(&pair.v, sigma)?;
            let c = pair.v.r() as f64 / m as f64;
            for i in 0..m {
                p[(i, i)] -= c;
            }
            w += p * pair.alpha;
        }
        Ok(w)
    }
}

/// I_P(V) = (r/m)·dim V − Σ_j w_j dim(U_j ∩ V).
pub fn i_value(meas: &EmpiricalMeasure, v: &SubspacePoint, tol: f64) -> Result<f64> {
    if v.m() != meas.m() {
        return Err(GsError::Usage("subspace and measure live in different dimensions".into()));
    }
    let (m, r) = (meas.m() as f64, meas.r() as f64);
    let hit: f64 = meas.iter().map(|(u, w)| w * dim_intersection(u, v, tol) as f64).sum();
    Ok(r / m * v.r() as f64 - hit)
}

/// Span key: the orthogonal projector rounded to 1e-6, plus the dimension.
fn span_key(v: &SubspacePoint) -> Vec<i64> {
    let p = v.euclidean_projector();
    let mut key = vec![v.r() as i64];
    for j in 0..p.ncols() {
        for i in 0..=j {
            key.push((p[(i, j)] * 1e6).round() as i64);
        }
    }
    key
}

struct Generator<'a> {
    meas: &'a EmpiricalMeasure,
    seen: HashSet<Vec<i64>>,
    out: Vec<SubspaceCandidate>,
    evals: usize,
    capped: bool,
}

impl Generator<'_> {
    fn full(&mut self) -> bool {
        if self.out.len() >= MAX_CANDIDATES || self.evals >= MAX_PAIR_EVALS {
            self.capped = true;
        }
        self.capped
    }

    fn push(&mut self, v: SubspacePoint, provenance: Provenance) -> bool {
        if self.full() {
            return false;
        }
        if self.seen.insert(span_key(&v)) {
            self.out.push(SubspaceCandidate { v, provenance });
            return true;
        }
        false
    }

    /// Depth-first sums of atoms `start..` added to `current`; full-space sums are pruned.
    fn sums(&mut self, atoms: &[SubspacePoint], current: &SubspacePoint, start: usize, depth: usize, opts: (usize, usize)) {
        let (max_dim_sum, max_subset) = opts;
        for j in start..atoms.len() {
            if self.full() {
                return;
            }
            self.evals += 1;
            let basis = subspace_sum(current, &atoms[j], RANK_TOL);
            let dim = basis.ncols();
            if dim <= current.r() || dim > max_dim_sum {
                continue;
            }
            let Some(next) = proper_subspace(basis) else { continue };
            self.push(next.clone(), Provenance::SampleSum);
            if depth + 1 < max_subset {
                self.sums(atoms, &next, j + 1, depth + 1, opts);
            }
        }
    }

    fn intersect(&mut self, a: &SubspacePoint, b: &SubspacePoint) {
        self.evals += 1;
        if let Some(v) = proper_subspace(subspace_intersection(a, b, RANK_TOL)) {
            self.push(v, Provenance::SampleIntersection);
        }
    }
}

/// Candidate proper subspaces generated from the atoms: the atoms themselves,
/// sums of up to `max_subset` atoms of dimension at most `max_dim_sum`, pairwise
/// intersections, and one round of sums and intersections of the generated set.
pub fn candidate_subspaces(meas: &EmpiricalMeasure, max_dim_sum: usize, max_subset: usize) -> CandidateSet {
    let m = meas.m();
    let max_dim_sum = max_dim_sum.min(m - 1);
    let mut gen = Generator { meas, seen: HashSet::new(), out: Vec::new(), evals: 0, capped: false };
    let mut atoms = Vec::new();
    for p in gen.meas.points() {
        if gen.seen.insert(span_key(p)) {
            gen.out.push(SubspaceCandidate { v: p.clone(), provenance: Provenance::SampleSum });
            atoms.push(p.clone());
        }
    }
    for (i, a) in atoms.iter().enumerate() {
        if max_subset >= 2 {
            gen.sums(&atoms, a, i + 1, 1, (max_dim_sum, max_subset));
        }
    }
    if meas.r() > 1 {
        'pairs: for i in 0..atoms.len() {
            for j in i + 1..atoms.len() {
                if gen.full() {
                    break 'pairs;
                }
                gen.intersect(&atoms[i], &atoms[j]);
            }
        }
    }
    let first_round: Vec<SubspacePoint> = gen.out.iter().map(|c| c.v.clone()).collect();
    'closure: for i in 0..first_round.len() {
        for j in i + 1..first_round.len() {
            if gen.full() {
                break 'closure;
            }
            let (a, b) = (&first_round[i], &first_round[j]);
            gen.evals += 1;
            let basis = subspace_sum(a, b, RANK_TOL);
            if basis.ncols() <= max_dim_sum {
                if let Some(v) = proper_subspace(basis) {
                    gen.push(v, Provenance::SampleSum);
                }
            }
            gen.intersect(a, b);
        }
    }
    CandidateSet { candidates: gen.out, capped: gen.capped }
}

/// Classification with the default candidate lattice and no extra candidates.
pub fn classify_existence(meas: &EmpiricalMeasure, tol: f64) -> ExistenceReport {
    classify_existence_with(meas, tol, &[])
}

/// Scores every generated and supplied candidate and applies the I_P trichotomy.
pub fn classify_existence_with(meas: &EmpiricalMeasure, tol: f64, extra: &[SubspaceCandidate]) -> ExistenceReport {
    let m = meas.m();
    let max_subset = (m - 1).min(4);
    let set = candidate_subspaces(meas, m - 1, max_subset);
    let mut candidates = set.candidates;
    candidates.extend(extra.iter().filter(|c| c.v.m() == m).cloned());
    let scored: Vec<ScoredCandidate> = candidates
        .into_par_iter()
        .map(|candidate| {
            let i_value = i_value(meas, &candidate.v, tol).expect("candidates share the ambient dimension");
            ScoredCandidate { dim: candidate.v.r(), candidate, i_value }
        })
        .collect();
    let scanned = scored.len();
    let min_i = scored.iter().map(|s| s.i_value).fold(f64::INFINITY, f64::min);
    let report = |verdict| ExistenceReport { verdict, scanned, min_i, capped: set.capped };
    if let Some(witness) = scored
        .iter()
        .filter(|s| s.i_value < -tol)
        .min_by(|a, b| a.i_value.total_cmp(&b.i_value))
    {
        return report(Verdict::NoGE { witness: witness.clone() });
    }
    let zeros: Vec<ScoredCandidate> = scored.iter().filter(|s| s.i_value.abs() <= tol).cloned().collect();
    if zeros.is_empty() {
        return report(Verdict::Unique);
    }
    let complement_ok = zeros.iter().all(|z| has_complement(meas, z, &scored, tol));
    if !complement_ok && set.capped {
        return report(Verdict::Inconclusive);
    }
    report(Verdict::Limit { zeros, complement_ok })
}

/// Whether some scanned V′ with I(V′) ≤ tol satisfies V ⊕ V′ = ℝᵐ and U = (U∩V) ⊕ (U∩V′) for every atom.
fn has_complement(meas: &EmpiricalMeasure, zero: &ScoredCandidate, scored: &[ScoredCandidate], tol: f64) -> bool {
    let m = meas.m();
    let v = &zero.candidate.v;
    scored.iter().any(|c| {
        let w = &c.candidate.v;
        c.i_value <= tol
            && v.r() + w.r() == m
            && numerical_rank(&hstack(v.orthonormal(), w.orthonormal()), RANK_TOL) == m
            && meas
                .points()
                .iter()
                .all(|u| dim_intersection(u, v, RANK_TOL) + dim_intersection(u, w, RANK_TOL) == u.r())
    })
}

/// Splits w = Σ_k α_k(Pr(V_k, Σ) − (dim V_k/m)Id) from the eigenvalues of V = g⁻¹wg.
///
/// Eigenvalues are sorted descending and clustered when consecutive gaps fall
/// below `CLUSTER_GAP` times the largest magnitude; V_k is g applied to the
/// sum of the first k eigenspaces.
pub fn decompose_velocity(sigma: &ScatterMatrix, w: &DMatrix<f64>) -> Result<VelocityFlag> {
    let m = sigma.dim();
    if w.nrows() != m || w.ncols() != m {
        return Err(GsError::Usage("velocity has the wrong shape".into()));
    }
    let scale = w.norm().max(1.0);
    let adjoint = sigma.matrix() * w.transpose() * sigma.inverse();
    if (&adjoint - w).norm() > 1e-10 * scale {
        return Err(GsError::Domain("velocity is not self-adjoint for (x|y)_Σ".into()));
    }
    if w.trace().abs() > 1e-10 * scale {
        return Err(GsError::Domain(format!("velocity has trace {:e}", w.trace())));
    }
    let root = sym_sqrt(sigma);
    let v = &root.g_inv * w * &root.g;
    let (vals, vecs) = sym_eigen(&v);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let top = vals.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
    if top == 0.0 {
        return Ok(VelocityFlag::default());
    }
    // Cluster boundaries: positions k where λ_(k) and λ_(k+1) are separated.
    let mut clusters: Vec<Vec<usize>> = vec![vec![order[0]]];
    for pair in order.windows(2) {
        if vals[pair[0]] - vals[pair[1]] > CLUSTER_GAP * top {
            clusters.push(Vec::new());
        }
        clusters.last_mut().expect("nonempty").push(pair[1]);
    }
    let means: Vec<f64> = clusters
        .iter()
        .map(|c| c.iter().map(|&i| vals[i]).sum::<f64>() / c.len() as f64)
        .collect();
    let mut pairs = Vec::new();
    let mut cols: Vec<usize> = Vec::new();
    for k in 0..clusters.len() - 1 {
        cols.extend(&clusters[k]);
        let e = DMatrix::from_fn(m, cols.len(), |i, j| vecs[(i, cols[j])]);
        let basis = &root.g * e;
        pairs.push(FlagPair { alpha: means[k] - means[k + 1], v: SubspacePoint::new(basis)? });
    }
    Ok(VelocityFlag { pairs })
}

/// Σ_k α_k I_P(V_k), the index of the flag of w.
pub fn flag_index(meas: &EmpiricalMeasure, sigma: &ScatterMatrix, w: &DMatrix<f64>) -> Result<f64> {
    let flag = decompose_velocity(sigma, w)?;
    flag.pairs
        .iter()
        .map(|p| Ok(p.alpha * i_value(meas, &p.v, RANK_TOL)?))
        .sum()
}

/// lim_{t→∞} d/dt ℓ_P(e^{tw}Σ) = ½·Σ_k α_k I_P(V_k).
///
/// The factor ½ comes from ℓ_U = ½ log det(XᵀΣ⁻¹X) + const; `flag_index` returns the sum without it.
pub fn asymptotic_slope(meas: &EmpiricalMeasure, sigma: &ScatterMatrix, w: &DMatrix<f64>) -> Result<f64> {
    Ok(0.5 * flag_index(meas, sigma, w)?)
}

/// ℓ_P(e^{tw}Σ), evaluated in the eigenbasis of w so that large t stays accurate.
///
/// With g = Σ^{1/2} and g⁻¹wg = E·diag(λ)·Eᵀ, each atom contributes
/// ½ log det(Yᵀ diag(e^{−tλ}) Y) with Y = Eᵀg⁻¹Q, computed from a QR factorization
/// of the rows of diag(e^{−tλ/2})Y sorted by decreasing weight.
pub fn ray_loglik(meas: &EmpiricalMeasure, sigma: &ScatterMatrix, w: &DMatrix<f64>, t: f64) -> Result<f64> {
    let m = sigma.dim();
    if meas.m() != m || w.nrows() != m || w.ncols() != m {
        return Err(GsError::Usage("dimension mismatch".into()));
    }
    let root = sym_sqrt(sigma);
    let v = &root.g_inv * w * &root.g;
    let (vals, vecs) = sym_eigen(&v);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let lo = vals[order[0]];
    let basis = vecs.transpose() * &root.g_inv;
    let mut total = 0.0;
    for (u, wt) in meas.iter() {
        let y = &basis * u.orthonormal();
        let r = u.r();
        // Rows scaled by e^{−t(λ_i − λ_min)/2} ∈ (0, 1], largest first.
        let scaled = DMatrix::from_fn(m, r, |i, j| {
            let k = order[i];
            y[(k, j)] * (-0.5 * t * (vals[k] - lo)).exp()
        });
        let rfac = scaled.qr().r();
        let logdet: f64 = (0..r).map(|i| 2.0 * rfac[(i, i)].abs().ln()).sum::<f64>() - t * lo * r as f64;
        total += wt * 0.5 * logdet;
    }
    Ok(total)
}

/// Flag of the escape direction of an iteration: the normalized log map from
/// the first iterate to the last, written as w = WΣ⁻¹ and decomposed.
pub fn boundary_flag(iterates: &[ScatterMatrix]) -> Result<VelocityFlag> {
    if iterates.len() < 2 {
        return Err(GsError::EmptyFlag("need at least two iterates".into()));
    }
    let first = &iterates[0];
    let last = iterates.last().expect("nonempty");
    let k = iterates.len();
    let tail = &iterates[k - 1 - ((k - 1) / 3).max(1)];
    let growth = distance(first, last) - distance(first, tail);
    if !(growth > 1e-6) {
        return Err(GsError::EmptyFlag(format!(
            "iterates are stationary (distance grew by {growth:e} over the last third)"
        )));
    }
    let tangent = log_map(first, last)?;
    let n = norm(first, &tangent)?;
    let w = tangent.matrix() * first.inverse() / n;
    // Rounding in WΣ⁻¹ can exceed the adjointness check; re-symmetrize in whitened form.
    let root = sym_sqrt(first);
    let v = &root.g_inv * &w * &root.g;
    let v = (&v + v.transpose()) * 0.5;
    let w = &root.g * v * &root.g_inv;
    decompose_velocity(first, &w)
}

/// The most negative I_P over a flag, for explaining a divergence.
pub fn flag_min_i(meas: &EmpiricalMeasure, flag: &VelocityFlag, tol: f64) -> Result<Option<(f64, SubspacePoint)>> {
    let mut best: Option<(f64, SubspacePoint)> = None;
    for pair in &flag.pairs {
        let i = i_value(meas, &pair.v, tol)?;
        if best.as_ref().is_none_or(|(b, _)| i < *b) {
            best = Some((i, pair.v.clone()));
        }
    }
    Ok(best)
}

/// Orthonormal basis of the span of all atoms.
pub fn atom_span(meas: &EmpiricalMeasure) -> DMatrix<f64> {
    let mut stacked = DMatrix::zeros(meas.m(), 0);
    for p in meas.points() {
        stacked = hstack(&stacked, p.orthonormal());
    }
    range_basis(&stacked, RANK_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{fixed_point_solve, SolverOptions, SolverStatus};
    use crate::grassmann::gaussian_sample;
    use crate::manifold::{geodesic, random_scatter, sym_exp, TangentVector};
    use crate::mfunc::loglik;
    use crate::mfunc::testutil::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn diag(d: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(d))
    }

    fn coord(m: usize, idx: &[usize]) -> SubspacePoint {
        SubspacePoint::coordinate(m, idx).unwrap()
    }

    fn line2(angle: f64) -> SubspacePoint {
        SubspacePoint::new(DMatrix::from_column_slice(2, 1, &[angle.cos(), angle.sin()])).unwrap()
    }

    fn orthogonal_lines() -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(vec![coord(2, &[0]), coord(2, &[1])]).unwrap()
    }

    fn planar_lines() -> EmpiricalMeasure {
        let pts = [0.3, 1.1, 2.0, 2.7]
            .iter()
            .map(|a: &f64| SubspacePoint::new(DMatrix::from_column_slice(3, 1, &[a.cos(), a.sin(), 0.0])).unwrap())
            .collect();
        EmpiricalMeasure::uniform(pts).unwrap()
    }

    /// dim(U ∩ V) from the eigenvalues of the Gram matrix of [Q_U | Q_V] equal to zero.
    fn oracle_dim_intersection(u: &SubspacePoint, v: &SubspacePoint) -> usize {
        let s = hstack(u.orthonormal(), v.orthonormal());
        let gram = s.transpose() * s;
        let eig = gram.symmetric_eigenvalues();
        eig.iter().filter(|&&x| x.abs() < 1e-9).count()
    }

    fn oracle_i(meas: &EmpiricalMeasure, v: &SubspacePoint) -> f64 {
        let (m, r) = (meas.m() as f64, meas.r() as f64);
        r / m * v.r() as f64 - meas.iter().map(|(u, w)| w * oracle_dim_intersection(u, v) as f64).sum::<f64>()
    }

    #[test]
    fn i_value_examples() {
        let meas = orthogonal_lines();
        assert_eq!(i_value(&meas, &coord(2, &[0]), I_TOL).unwrap(), 0.0);
        assert_eq!(i_value(&meas, &line2(0.7), I_TOL).unwrap(), 0.5);
        let planar = planar_lines();
        let span = SubspacePoint::new(atom_span(&planar)).unwrap();
        assert!(i_value(&planar, &span, I_TOL).unwrap() < 0.0);
        assert!(i_value(&planar, &coord(4, &[0]), I_TOL).is_err());
    }

    #[test]
    fn three_lines_candidates_are_the_lines() {
        let meas = EmpiricalMeasure::uniform(vec![line2(0.0), line2(1.0), line2(2.0)]).unwrap();
        let set = candidate_subspaces(&meas, 1, 2);
        assert_eq!(set.candidates.len(), 3);
        assert!(!set.capped);
        for (c, p) in set.candidates.iter().zip(meas.points()) {
            assert!(c.v.same_span(p, 1e-12));
        }
    }

    #[test]
    fn planes_sharing_a_line_yield_the_line() {
        let a = SubspacePoint::new(DMatrix::from_column_slice(3, 2, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        let b = SubspacePoint::new(DMatrix::from_column_slice(3, 2, &[1.0, 1.0, 0.0, 1.0, -1.0, 0.5])).unwrap();
        let meas = EmpiricalMeasure::uniform(vec![a, b]).unwrap();
        let shared = SubspacePoint::new(DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0])).unwrap();
        let set = candidate_subspaces(&meas, 2, 2);
        assert!(set
            .candidates
            .iter()
            .any(|c| c.provenance == Provenance::SampleIntersection && c.v.same_span(&shared, 1e-10)));
    }

    #[test]
    fn random_planes_have_no_negative_candidate() {
        let mut g = rng(23);
        let meas = random_empirical(4, 2, 5, &mut g);
        let set = candidate_subspaces(&meas, 3, 2);
        assert!(set.candidates.len() >= 5);
        for c in &set.candidates {
            let i = oracle_i(&meas, &c.v);
            assert!((i - i_value(&meas, &c.v, I_TOL).unwrap()).abs() <= 1e-12);
            assert!(i >= 0.0);
        }
    }

    #[test]
    fn gaussian_sample_classifies_unique() {
        let mut g = rng(24);
        let meas = gaussian_sample(&ScatterMatrix::identity(3), 2, 60, &mut g).unwrap();
        let report = classify_existence(&meas, I_TOL);
        assert!(matches!(report.verdict, Verdict::Unique), "{:?}", report.verdict);
        assert_eq!(report.verdict.exit_code(), 0);
        assert!(report.min_i > 0.0);
    }

    #[test]
    fn orthogonal_lines_classify_limit() {
        let report = classify_existence(&orthogonal_lines(), I_TOL);
        let Verdict::Limit { zeros, complement_ok } = &report.verdict else {
            panic!("expected Limit, got {:?}", report.verdict);
        };
        assert!(complement_ok);
        assert_eq!(zeros.len(), 2);
        assert!(zeros[0].candidate.v.same_span(&coord(2, &[0]), 1e-12));
        assert!(zeros[1].candidate.v.same_span(&coord(2, &[1]), 1e-12));
        assert_eq!(report.verdict.exit_code(), 1);
    }

    #[test]
    fn planar_atoms_classify_no_ge() {
        let report = classify_existence(&planar_lines(), I_TOL);
        let Verdict::NoGE { witness } = &report.verdict else {
            panic!("expected NoGE, got {:?}", report.verdict);
        };
        assert!(witness.candidate.v.same_span(&coord(3, &[0, 1]), 1e-10));
        assert!(witness.i_value < -I_TOL);
        assert_eq!(report.verdict.exit_code(), 2);
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["verdict"]["kind"], "NoGE");
        assert_eq!(json["verdict"]["witness"]["V"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn limit_without_complement() {
        // Lines e₁, e₂ and e₁+e₂ with weights making span(e₁) a zero: I = ½ − w₁ = 0.
        let diag_line = SubspacePoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 1.0])).unwrap();
        let meas = EmpiricalMeasure::new(vec![coord(2, &[0]), coord(2, &[1]), diag_line], vec![0.5, 0.25, 0.25]).unwrap();
        let report = classify_existence(&meas, I_TOL);
        assert!(matches!(report.verdict, Verdict::Limit { complement_ok: false, .. }), "{:?}", report.verdict);
    }

    #[test]
    fn user_supplied_candidates_are_scanned() {
        let meas = planar_lines();
        let extra = [SubspaceCandidate { v: coord(3, &[0, 1]), provenance: Provenance::UserSupplied }];
        let report = classify_existence_with(&meas, I_TOL, &extra);
        assert!(matches!(report.verdict, Verdict::NoGE { .. }));
        assert!(report.scanned >= 1 + meas.len());
    }

    #[test]
    fn decompose_distinguished_direction() {
        for (m, r) in [(2, 1), (4, 1), (5, 2), (6, 3)] {
            let a = crate::grassmann::distinguished_direction(m, r);
            let flag = decompose_velocity(&ScatterMatrix::identity(m), &a).unwrap();
            assert_eq!(flag.pairs.len(), 1);
            let lambda = a[(0, 0)];
            let beta = -a[(m - 1, m - 1)];
            assert!((flag.pairs[0].alpha - (lambda + beta)).abs() <= 1e-12);
            let idx: Vec<usize> = (0..r).collect();
            assert!(flag.pairs[0].v.same_span(&coord(m, &idx), 1e-10));
        }
    }

    #[test]
    fn decompose_three_eigenvalues() {
        let w = diag(&[1.0, 1.0, -0.5, -1.5]);
        let mut g = rng(25);
        let sigma = random_scatter(4, 0.6, &mut g);
        // e^{tw}Σ-type velocity at Σ: w' = g_Σ·(g_Σ⁻¹ w g_Σ) is not needed; conjugate into a Σ-self-adjoint form.
        let root = sym_sqrt(&sigma);
        let o = random_orthogonal(4, &mut g);
        let v = &o * &w * o.transpose();
        let ws = &root.g * v * &root.g_inv;
        let flag = decompose_velocity(&sigma, &ws).unwrap();
        assert_eq!(flag.pairs.len(), 2);
        assert_eq!(flag.pairs[0].v.r(), 2);
        assert_eq!(flag.pairs[1].v.r(), 3);
        assert!((flag.pairs[0].alpha - 1.5).abs() <= 1e-10);
        assert!((flag.pairs[1].alpha - 1.0).abs() <= 1e-10);
        assert_eq!(dim_intersection(&flag.pairs[0].v, &flag.pairs[1].v, 1e-8), 2);
        assert!((flag.reconstruct(&sigma).unwrap() - ws).norm() <= 1e-8);
    }

    fn random_orthogonal(m: usize, g: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::<f64>::from_fn(m, m, |_, _| g.random::<f64>() - 0.5);
        a.qr().q()
    }

    #[test]
    fn decompose_zero_and_invalid() {
        let id = ScatterMatrix::identity(3);
        assert!(decompose_velocity(&id, &DMatrix::zeros(3, 3)).unwrap().is_empty());
        assert!(matches!(decompose_velocity(&id, &diag(&[1.0, 0.0, 0.0])), Err(GsError::Domain(_))));
        let mut skew = DMatrix::zeros(3, 3);
        skew[(0, 1)] = 1.0;
        assert!(matches!(decompose_velocity(&id, &skew), Err(GsError::Domain(_))));
    }

    /// Random Σ-self-adjoint trace-free w with eigenvalues spread over at most `spread`.
    fn random_velocity(sigma: &ScatterMatrix, spread: f64, g: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = sigma.dim();
        let vals: Vec<f64> = (0..m).map(|_| g.random::<f64>() * spread).collect();
        velocity_with(sigma, vals, g)
    }

    /// Eigenvalues one unit apart up to a 10% jitter, so pre-asymptotic terms are O(e^{−0.9t}).
    fn separated_velocity(sigma: &ScatterMatrix, g: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = sigma.dim();
        let vals = (0..m).map(|i| i as f64 + 0.1 * (g.random::<f64>() - 0.5)).collect();
        velocity_with(sigma, vals, g)
    }

    fn velocity_with(sigma: &ScatterMatrix, mut vals: Vec<f64>, g: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = sigma.dim();
        let mean = vals.iter().sum::<f64>() / m as f64;
        vals.iter_mut().for_each(|v| *v -= mean);
        let o = random_orthogonal(m, g);
        let v = &o * diag(&vals) * o.transpose();
        let root = sym_sqrt(sigma);
        &root.g * v * &root.g_inv
    }

    /// ℓ_P along e^{tw}Σ = geodesic(Σ, wΣ, t).
    fn loglik_along(meas: &EmpiricalMeasure, sigma: &ScatterMatrix, w: &DMatrix<f64>, t: f64) -> f64 {
        let tangent = TangentVector::new(sigma, crate::manifold::symmetrize(&(w * sigma.matrix()))).unwrap();
        let point = geodesic(sigma, &tangent, t).unwrap();
        loglik(meas, &point, None).unwrap().value
    }

    #[test]
    fn ray_loglik_matches_direct_evaluation() {
        let mut g = rng(29);
        for case in 0..20 {
            let m = 2 + case % 4;
            let r = 1 + case % (m - 1);
            let meas = random_empirical(m, r, 6, &mut g);
            let sigma = random_scatter(m, 0.5, &mut g);
            let w = random_velocity(&sigma, 1.0, &mut g);
            for t in [-3.0, 0.0, 0.7, 4.0] {
                let direct = loglik_along(&meas, &sigma, &w, t);
                assert!((ray_loglik(&meas, &sigma, &w, t).unwrap() - direct).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn slope_positive_in_unique_case() {
        let mut g = rng(26);
        for _ in 0..10 {
            let meas = random_empirical(3, 1, 7, &mut g);
            let sigma = random_scatter(3, 0.4, &mut g);
            let w = random_velocity(&sigma, 1.0, &mut g);
            assert!(asymptotic_slope(&meas, &sigma, &w).unwrap() > 0.0);
        }
    }

    #[test]
    fn slope_zero_toward_limit_subspace() {
        let w = diag(&[0.5, -0.5]);
        assert_eq!(asymptotic_slope(&orthogonal_lines(), &ScatterMatrix::identity(2), &w).unwrap(), 0.0);
    }

    #[test]
    fn slope_matches_large_t_differences() {
        let mut g = rng(27);
        for case in 0..20 {
            let m = 2 + case % 3;
            let r = 1 + case % (m - 1);
            let meas = random_empirical(m, r, m * m + 1, &mut g);
            let sigma = random_scatter(m, 0.3, &mut g);
            let w = separated_velocity(&sigma, &mut g);
            let (t, h) = (30.0, 0.5);
            let fd = (ray_loglik(&meas, &sigma, &w, t + h).unwrap() - ray_loglik(&meas, &sigma, &w, t - h).unwrap()) / (2.0 * h);
            let slope = asymptotic_slope(&meas, &sigma, &w).unwrap();
            assert!((fd - slope).abs() <= 1e-4, "case {case}: fd {fd} slope {slope}");
            assert!((flag_index(&meas, &sigma, &w).unwrap() - 2.0 * slope).abs() <= 1e-15);
        }
    }

    #[test]
    fn boundary_flag_of_escaping_run() {
        let meas = escaping_instance();
        let mut iterates = vec![ScatterMatrix::identity(3)];
        for k in 1..=20 {
            let opts = SolverOptions { max_iter: k, ..SolverOptions::default() };
            let res = fixed_point_solve(&meas, &ScatterMatrix::identity(3), &opts).unwrap();
            iterates.push(res.estimate);
        }
        let flag = boundary_flag(&iterates).unwrap();
        let plane = coord(3, &[0, 1]);
        let hit = flag.pairs.iter().find(|p| p.v.same_span(&plane, 1e-6)).expect("plane in flag");
        assert!(i_value(&meas, &hit.v, 1e-6).unwrap() < 0.0);
        let (worst, _) = flag_min_i(&meas, &flag, 1e-6).unwrap().unwrap();
        assert!(worst < 0.0);
    }

    #[test]
    fn boundary_flag_of_converged_run_is_empty() {
        let meas = EmpiricalMeasure::uniform(vec![line2(0.0), line2(1.0), line2(2.0)]).unwrap();
        let start = ScatterMatrix::new(diag(&[2.0, 0.5])).unwrap();
        let res = fixed_point_solve(&meas, &start, &SolverOptions::default()).unwrap();
        assert!(matches!(res.status, SolverStatus::Converged));
        let mut iterates = vec![start.clone()];
        for k in 1..=res.iterations {
            let opts = SolverOptions { max_iter: k, ..SolverOptions::default() };
            iterates.push(fixed_point_solve(&meas, &start, &opts).unwrap().estimate);
        }
        assert!(matches!(boundary_flag(&iterates), Err(GsError::EmptyFlag(_))));
        assert!(matches!(boundary_flag(&iterates[..1]), Err(GsError::EmptyFlag(_))));
    }

    #[test]
    fn boundary_flag_of_synthetic_ray() {
        let mut g = rng(28);
        for (m, r) in [(3, 1), (4, 2), (5, 3)] {
            let a = crate::grassmann::distinguished_direction(m, r);
            let iterates: Vec<ScatterMatrix> = (0..30)
                .map(|k| {
                    let noise = DMatrix::<f64>::from_fn(m, m, |_, _| 1e-3 * (g.random::<f64>() - 0.5));
                    let e = sym_exp(&(&a * (0.5 * k as f64) + crate::manifold::symmetrize(&noise)));
                    ScatterMatrix::normalized(e).unwrap()
                })
                .collect();
            let flag = boundary_flag(&iterates).unwrap();
            let idx: Vec<usize> = (0..r).collect();
            let main = flag.pairs.iter().max_by(|a, b| a.alpha.total_cmp(&b.alpha)).unwrap();
            assert!(main.v.same_span(&coord(m, &idx), 1e-4));
            let rest: f64 = flag.pairs.iter().map(|p| p.alpha).sum::<f64>() - main.alpha;
            assert!(rest < 1e-2 * main.alpha, "{flag:?}");
        }
    }
}
