//! Independent verification backends.
//!
//! Two kinds of oracles check the derivative machinery without sharing code
//! paths with it:
//!
//! * **Finite differences** on sampled sorted-eigenvalue curves. Sorted
//!   curves are generally only one-sided differentiable at crossings, so all
//!   stencils here are one-sided, with Richardson extrapolation over
//!   `h₀, h₀/2, h₀/4, …` to kill the `O(h)` and `O(h²)` truncation terms.
//!   The second-difference quotient follows the half-Taylor convention
//!   `λ̈ ≈ 2/h² (λ(t+h) − λ(t) − h λ̇)` — the same factor-2 normalization the
//!   cluster machinery reports — with the first derivative supplied by the
//!   caller.
//! * **Synthetic matrix pencils** `A(t) = A0 + tA1 + t²A2`,
//!   `B(t) = B0 + tB1 + t²B2`, all symmetric and positive definite on a
//!   validity interval. Quadratic families make `Ä`, `B̈` constant, so the
//!   second-derivative formulas hold with zero Taylor remainder and formula
//!   errors are not masked by remainder noise. [`random_pencil`] plants
//!   eigenvalue multiplicities at `t = 0` by conjugating a diagonal seed with
//!   a random orthogonal matrix.
//!
//! [`vsplit_gamma`] re-derives the second-order corrector from a complete
//! eigendecomposition (spectral splitting below/above the cluster) as a
//! cross-check of the bordered saddle solve in the main path.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gevp::reduce_to_standard;
use crate::hadamard::{
    detect_clusters, first_derivatives_from_basis, second_derivatives, Cluster, ClusterReport,
    DensePencil, PencilForms, SensitivityReport, SubclusterReport, Tolerances,
};
use crate::assemble::FormSelector;

/// Which one-sided limit a finite difference approximates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Plus,
    Minus,
}

impl Side {
    /// Step sign: `+1` for the right limit, `−1` for the left.
    pub fn sign(self) -> f64 {
        match self {
            Side::Plus => 1.0,
            Side::Minus => -1.0,
        }
    }
}

/// Finite-difference parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FdConfig {
    /// Largest step; the stencil also samples `h0/2, …, h0/2^(depth−1)`.
    pub h0: f64,
    /// Number of Richardson levels (≥ 1).
    pub depth: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { h0: 1e-3, depth: 3 }
    }
}

/// A finite-difference estimate with diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct FdEstimate {
    /// Extrapolated value.
    pub value: f64,
    /// Magnitude of the last extrapolation correction — an error indicator.
    pub error_bar: f64,
    /// False when the extrapolation corrections failed to shrink, which
    /// signals that `h0` straddles an event or sits in roundoff.
    pub monotone: bool,
}

/// Richardson tableau for a first-order one-sided scheme: level `k` removes
/// the `O(h^k)` error term via weights `2^k`.
fn richardson(raw: &[f64]) -> FdEstimate {
    let depth = raw.len();
    let mut table: Vec<Vec<f64>> = vec![raw.to_vec()];
    for k in 1..depth {
        let prev = &table[k - 1];
        let pow = (1u64 << k) as f64;
        let next: Vec<f64> =
            (k..depth).map(|i| (pow * prev[i - k + 1] - prev[i - k]) / (pow - 1.0)).collect();
        table.push(next);
    }
    let diag: Vec<f64> = (0..depth).map(|k| table[k][0]).collect();
    let value = diag[depth - 1];
    let error_bar = if depth >= 2 {
        (diag[depth - 1] - diag[depth - 2]).abs()
    } else {
        f64::NAN
    };
    let mut monotone = true;
    for k in 2..depth {
        let prev = (diag[k - 1] - diag[k - 2]).abs();
        let cur = (diag[k] - diag[k - 1]).abs();
        if cur > prev.max(1e-14) {
            monotone = false;
        }
    }
    FdEstimate { value, error_bar, monotone }
}

fn check_fd_args(t: f64, j: usize, cfg: &FdConfig) -> Result<()> {
    if j == 0 {
        return Err(Error::InvalidParam("curve index j is 1-based".into()));
    }
    if !(cfg.h0 > 0.0) || !t.is_finite() {
        return Err(Error::InvalidParam(format!(
            "finite differences need h0 > 0 and finite t (got h0 = {}, t = {t})",
            cfg.h0
        )));
    }
    if cfg.depth == 0 {
        return Err(Error::InvalidParam("Richardson depth must be at least 1".into()));
    }
    Ok(())
}

fn curve_value<F>(curve: &F, t: f64, j: usize) -> Result<f64>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    let vals = curve(t)?;
    if j > vals.len() {
        return Err(Error::InvalidParam(format!(
            "curve index {j} exceeds the {} sampled eigenvalues",
            vals.len()
        )));
    }
    Ok(vals[j - 1])
}

/// One-sided first derivative `λ̇±_j(t)` of a sorted-eigenvalue curve by
/// Richardson-extrapolated difference quotients `(λ_j(t+sh) − λ_j(t))/(sh)`.
pub fn fd_first_derivative<F>(
    curve: &F,
    t: f64,
    j: usize,
    cfg: &FdConfig,
    side: Side,
) -> Result<FdEstimate>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    check_fd_args(t, j, cfg)?;
    let base = curve_value(curve, t, j)?;
    let s = side.sign();
    let mut raw = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let h = cfg.h0 / (1u64 << i) as f64;
        let shifted = curve_value(curve, t + s * h, j)?;
        raw.push((shifted - base) / (s * h));
    }
    Ok(richardson(&raw))
}

/// One-sided second derivative by the factor-2 quotient
/// `2/h² (λ_j(t+sh) − λ_j(t) − sh·λ̇±_j(t))`, Richardson extrapolated.
///
/// `first_deriv` must be the matching one-sided first derivative; any error
/// in it enters the estimate amplified by `2/h`, so supply an analytic or
/// solver-grade value rather than a finite-difference one.
pub fn fd_second_derivative<F>(
    curve: &F,
    t: f64,
    j: usize,
    first_deriv: f64,
    cfg: &FdConfig,
    side: Side,
) -> Result<FdEstimate>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    check_fd_args(t, j, cfg)?;
    let base = curve_value(curve, t, j)?;
    let s = side.sign();
    let mut raw = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let h = cfg.h0 / (1u64 << i) as f64;
        let shifted = curve_value(curve, t + s * h, j)?;
        raw.push(2.0 / (h * h) * (shifted - base - s * h * first_deriv));
    }
    Ok(richardson(&raw))
}

/// A planted eigenvalue of [`random_pencil`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedCluster {
    pub value: f64,
    pub multiplicity: usize,
}

/// Quadratic-in-t symmetric pencil family
/// `A(t) = A0 + tA1 + t²A2`, `B(t) = B0 + tB1 + t²B2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "PencilRepr", into = "PencilRepr")]
pub struct PencilFamily {
    pub a0: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    /// Open interval on which both forms are positive definite.
    pub t_valid: (f64, f64),
    /// Generator seed, when produced by [`random_pencil`].
    pub seed: Option<u64>,
    /// Planted multiplicities, when produced by [`random_pencil`].
    pub plan: Option<Vec<PlannedCluster>>,
}

/// JSON image of a pencil family: row-major nested arrays.
#[derive(Serialize, Deserialize)]
struct PencilRepr {
    dim: usize,
    a0: Vec<Vec<f64>>,
    a1: Vec<Vec<f64>>,
    a2: Vec<Vec<f64>>,
    b0: Vec<Vec<f64>>,
    b1: Vec<Vec<f64>>,
    b2: Vec<Vec<f64>>,
    t_valid: [f64; 2],
    seed: Option<u64>,
    plan: Option<Vec<PlannedCluster>>,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], dim: usize, name: &str) -> std::result::Result<DMatrix<f64>, String> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(format!("matrix {name} is not {dim}x{dim}"));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

impl From<PencilFamily> for PencilRepr {
    fn from(p: PencilFamily) -> Self {
        PencilRepr {
            dim: p.a0.nrows(),
            a0: matrix_to_rows(&p.a0),
            a1: matrix_to_rows(&p.a1),
            a2: matrix_to_rows(&p.a2),
            b0: matrix_to_rows(&p.b0),
            b1: matrix_to_rows(&p.b1),
            b2: matrix_to_rows(&p.b2),
            t_valid: [p.t_valid.0, p.t_valid.1],
            seed: p.seed,
            plan: p.plan,
        }
    }
}

impl TryFrom<PencilRepr> for PencilFamily {
    type Error = String;

    fn try_from(r: PencilRepr) -> std::result::Result<Self, String> {
        Ok(PencilFamily {
            a0: rows_to_matrix(&r.a0, r.dim, "a0")?,
            a1: rows_to_matrix(&r.a1, r.dim, "a1")?,
            a2: rows_to_matrix(&r.a2, r.dim, "a2")?,
            b0: rows_to_matrix(&r.b0, r.dim, "b0")?,
            b1: rows_to_matrix(&r.b1, r.dim, "b1")?,
            b2: rows_to_matrix(&r.b2, r.dim, "b2")?,
            t_valid: (r.t_valid[0], r.t_valid[1]),
            seed: r.seed,
            plan: r.plan,
        })
    }
}

impl PencilFamily {
    pub fn dim(&self) -> usize {
        self.a0.nrows()
    }

    fn in_range(&self, t: f64) -> Result<()> {
        if t <= self.t_valid.0 || t >= self.t_valid.1 {
            return Err(Error::OutOfRange { t, lo: self.t_valid.0, hi: self.t_valid.1 });
        }
        Ok(())
    }

    pub fn a(&self, t: f64) -> DMatrix<f64> {
        &self.a0 + &self.a1 * t + &self.a2 * (t * t)
    }

    pub fn b(&self, t: f64) -> DMatrix<f64> {
        &self.b0 + &self.b1 * t + &self.b2 * (t * t)
    }

    pub fn a_dot(&self, t: f64) -> DMatrix<f64> {
        &self.a1 + &self.a2 * (2.0 * t)
    }

    pub fn b_dot(&self, t: f64) -> DMatrix<f64> {
        &self.b1 + &self.b2 * (2.0 * t)
    }

    pub fn a_ddot(&self) -> DMatrix<f64> {
        &self.a2 * 2.0
    }

    pub fn b_ddot(&self) -> DMatrix<f64> {
        &self.b2 * 2.0
    }

    /// The six frozen forms at parameter `t`, ready for the cluster
    /// machinery.
    pub fn forms_at(&self, t: f64) -> Result<DensePencil> {
        self.in_range(t)?;
        Ok(DensePencil {
            a: self.a(t),
            b: self.b(t),
            a_dot: self.a_dot(t),
            b_dot: self.b_dot(t),
            a_ddot: self.a_ddot(),
            b_ddot: self.b_ddot(),
        })
    }

    /// Sorted generalized eigenvalues at `t` (the sampled curve).
    pub fn eigenvalues(&self, t: f64, k: usize) -> Result<Vec<f64>> {
        self.in_range(t)?;
        let n = self.dim();
        if k == 0 || k > n {
            return Err(Error::InvalidParam(format!(
                "requested {k} eigenvalues from a pencil of dimension {n}"
            )));
        }
        let (c, _l) = reduce_to_standard(&self.a(t), &self.b(t))?;
        let mut vals: Vec<f64> = c.symmetric_eigenvalues().iter().copied().collect();
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        vals.truncate(k);
        Ok(vals)
    }

    /// Verifies both forms positive definite (by Cholesky) at `samples`
    /// evenly spaced interior points of the validity interval.
    pub fn validate(&self, samples: usize) -> Result<()> {
        let (lo, hi) = self.t_valid;
        if !(lo < hi) {
            return Err(Error::InvalidParam(format!(
                "empty validity interval ({lo}, {hi})"
            )));
        }
        let count = samples.max(1);
        for i in 0..count {
            let frac = (i as f64 + 0.5) / count as f64;
            let t = lo + frac * (hi - lo);
            if Cholesky::new(self.a(t)).is_none() {
                return Err(Error::NotSpd(format!("A(t) is not positive definite at t = {t}")));
            }
            if Cholesky::new(self.b(t)).is_none() {
                return Err(Error::NotSpd(format!("B(t) is not positive definite at t = {t}")));
            }
        }
        Ok(())
    }

    /// Writes the family as pretty JSON (atomically).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        crate::runner::atomic_write(path, &bytes)
    }

    /// Reads a family saved by [`PencilFamily::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Deterministic random orthogonal matrix (QR of a uniform square matrix,
/// signs fixed by the R diagonal).
pub fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(dim, dim, |_, _| rng.gen::<f64>() - 0.5);
    let qr = raw.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            let col = -q.column(j);
            q.set_column(j, &col);
        }
    }
    q
}

fn random_symmetric(dim: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(dim, dim, |_, _| rng.gen::<f64>() - 0.5);
    (&raw + raw.transpose()) * (0.5 * amplitude)
}

/// Generates an SPD pencil family with exact eigenvalue multiplicities
/// planted at `t = 0`.
///
/// In the frame of a seeded random orthogonal matrix Q the construction
/// uses diagonal `B0` and `A0 = diag(λ_i · B0_ii)`, so the generalized
/// eigenvalues at `t = 0` are the planted values exactly (followed by
/// distinct filler values above them). The `t` and `t²` coefficients are
/// random symmetric matrices of Frobenius norm proportional to
/// `perturbation`; the validity interval is sized so both forms keep half
/// their smallest eigenvalue, and is verified by Cholesky sampling.
pub fn random_pencil(
    dim: usize,
    seed: u64,
    plan: &[PlannedCluster],
    perturbation: f64,
) -> Result<PencilFamily> {
    let planted: usize = plan.iter().map(|p| p.multiplicity).sum();
    if dim == 0 || planted > dim {
        return Err(Error::InvalidParam(format!(
            "cannot plant {planted} eigenvalues in a pencil of dimension {dim}"
        )));
    }
    for p in plan {
        if p.multiplicity == 0 || !(p.value > 0.0) {
            return Err(Error::InvalidParam(format!(
                "planted eigenvalues need positive value and multiplicity (got {} x{})",
                p.value, p.multiplicity
            )));
        }
    }
    if !(perturbation >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "perturbation amplitude must be nonnegative, got {perturbation}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lambdas: Vec<f64> = Vec::with_capacity(dim);
    for p in plan {
        lambdas.extend(std::iter::repeat_n(p.value, p.multiplicity));
    }
    let mut next = plan.iter().fold(1.0f64, |acc, p| acc.max(p.value));
    while lambdas.len() < dim {
        next += 0.9 + 0.2 * rng.gen::<f64>();
        lambdas.push(next);
    }

    let db: Vec<f64> = (0..dim).map(|_| 0.6 + 0.8 * rng.gen::<f64>()).collect();
    let q = random_orthogonal(dim, &mut rng);
    let diag = |vals: &[f64]| DMatrix::from_diagonal(&DVector::from_row_slice(vals));
    let symmetrize = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    let b0 = symmetrize(&q * diag(&db) * q.transpose());
    let da: Vec<f64> = lambdas.iter().zip(&db).map(|(l, d)| l * d).collect();
    let a0 = symmetrize(&q * diag(&da) * q.transpose());

    let a1 = random_symmetric(dim, perturbation, &mut rng);
    let a2 = random_symmetric(dim, 0.5 * perturbation, &mut rng);
    let b1 = random_symmetric(dim, 0.1 * perturbation, &mut rng);
    let b2 = random_symmetric(dim, 0.05 * perturbation, &mut rng);

    // Radius keeping λ_min(X(t)) ≥ λ_min(X0)/2 for both forms: with
    // |t| ≤ r ≤ 1 the perturbation is bounded by r (‖X1‖_F + ‖X2‖_F).
    let min_a = da.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_b = db.iter().cloned().fold(f64::INFINITY, f64::min);
    let radius = |min_eig: f64, m1: &DMatrix<f64>, m2: &DMatrix<f64>| {
        let denom = m1.norm() + m2.norm();
        if denom > 0.0 {
            (min_eig / denom).min(1.0)
        } else {
            10.0
        }
    };
    let r = radius(min_a, &a1, &a2).min(radius(min_b, &b1, &b2)) * 0.5;

    let fam = PencilFamily {
        a0,
        a1,
        a2,
        b0,
        b1,
        b2,
        t_valid: (-r, r),
        seed: Some(seed),
        plan: Some(plan.to_vec()),
    };
    fam.validate(7)?;
    Ok(fam)
}

/// Second-order corrector from a complete eigendecomposition.
///
/// With all B-orthonormal eigenpairs `(λ_i, x_i)` available, the solution of
/// `C w = −Ċ u` that is B-orthogonal to the cluster splits spectrally into
/// the parts below and above the cluster:
///
/// ```text
/// w = − Σ_{i ∉ cluster}  ⟨Ċu, x_i⟩ / (λ_i − λ) · x_i
/// ```
///
/// where `Ċu = (Ȧ − λ̃Ḃ − λ′B)u`. This is the classical
/// sum-over-states form; it must agree with the bordered saddle solve to
/// solver accuracy, which is what the tests assert.
pub fn vsplit_gamma<P: PencilForms>(
    forms: &P,
    values: &[f64],
    vectors: &DMatrix<f64>,
    cluster: &Cluster,
    u: &DVector<f64>,
    lambda_prime: f64,
) -> Result<DVector<f64>> {
    let n = forms.dim();
    if values.len() != n || vectors.ncols() != n || vectors.nrows() != n {
        return Err(Error::InvalidParam(format!(
            "spectral corrector needs the complete eigendecomposition \
             ({} values, {}x{} vectors, dimension {n})",
            values.len(),
            vectors.nrows(),
            vectors.ncols()
        )));
    }
    if u.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} for pencil dimension {n}",
            u.len()
        )));
    }
    let lam_t = cluster.lambda + forms.shift();
    let cdot_u = forms.matvec(FormSelector::ADot, u)
        - forms.matvec(FormSelector::BDot, u) * lam_t
        - forms.matvec(FormSelector::B, u) * lambda_prime;
    let lo = cluster.k - 1;
    let hi = cluster.k - 1 + cluster.m;
    let mut w = DVector::zeros(n);
    for (i, &val) in values.iter().enumerate() {
        if i >= lo && i < hi {
            continue;
        }
        let gap = val - cluster.lambda;
        if gap.abs() <= 1e-12 * cluster.lambda.abs().max(1.0) {
            return Err(Error::SingularSystem { pivot: gap.abs() });
        }
        let xi = vectors.column(i).clone_owned();
        let coeff = xi.dot(&cdot_u) / gap;
        w.axpy(-coeff, &xi, 1.0);
    }
    Ok(w)
}

/// Outcome of one end-to-end pencil check: cluster machinery versus finite
/// differences on both sides of every index.
#[derive(Clone, Copy, Debug)]
pub struct PencilCheck {
    pub seed: u64,
    /// Largest |FD − ν| over all indices and sides.
    pub max_first_err: f64,
    /// Largest |FD − σ| / max(1, |σ|) over indices whose governing
    /// sub-cluster has a single member, both sides.
    pub max_second_rel_err: f64,
    /// Largest norm difference between the saddle-point corrector and the
    /// corrector summed from the complete eigendecomposition, over every
    /// branch of every cluster.
    pub max_gamma_err: f64,
    /// Count of non-monotone Richardson sequences encountered.
    pub fd_warnings: usize,
}

/// Runs the cluster machinery on a pencil family at `t` and confronts every
/// first and second one-sided derivative with its finite-difference value.
pub fn check_pencil_derivatives(
    fam: &PencilFamily,
    t: f64,
    fd: &FdConfig,
) -> Result<PencilCheck> {
    let n = fam.dim();
    let forms = fam.forms_at(t)?;
    let (vals, vecs, _res) = crate::gevp::solve_dense_pair(&forms.a, &forms.b, n, 1e-9)?;
    let tols = Tolerances::default();
    let clusters = detect_clusters(&vals, tols.cluster_rel_tol);

    let mut max_gamma_err = 0.0f64;
    let mut reports = Vec::new();
    for cl in &clusters {
        let basis = vecs.columns(cl.k - 1, cl.m).clone_owned();
        let first = first_derivatives_from_basis(&forms, cl.lambda, &basis, cl.k)?;
        // The saddle-point corrector must agree with the one summed from
        // the complete eigendecomposition, branch by branch.
        for i in 0..cl.m {
            let u = first.rotated_basis.column(i).clone_owned();
            let saddle = crate::hadamard::solve_gamma(
                &forms,
                &first.rotated_basis,
                cl.lambda,
                first.nu[i],
                &u,
            )?;
            let spectral = vsplit_gamma(&forms, &vals, &vecs, cl, &u, first.nu[i])?;
            max_gamma_err = max_gamma_err.max((&saddle - &spectral).norm());
        }
        let seconds = second_derivatives(&forms, &first, tols.deriv_tol)?;
        reports.push(ClusterReport {
            k: cl.k,
            m: cl.m,
            lambda: cl.lambda,
            nu: first.nu.clone(),
            subclusters: seconds
                .iter()
                .map(|s| SubclusterReport {
                    l: s.l,
                    r: s.r,
                    lambda_prime: s.lambda_prime,
                    sigma: s.sigma.clone(),
                })
                .collect(),
        });
    }
    let report = SensitivityReport {
        t,
        eigenvalues: vals,
        clusters: reports,
        tolerances: tols,
    };
    let data = report.branch_data();

    // Singleton governing sub-cluster per index and side, for the σ gate.
    let mut singleton_plus = vec![false; n];
    let mut singleton_minus = vec![false; n];
    for cl in &report.clusters {
        for j in cl.k..cl.k + cl.m {
            let jm = 2 * cl.k + cl.m - 1 - j;
            for sub in &cl.subclusters {
                if sub.l <= j && j < sub.r {
                    singleton_plus[j - 1] = sub.r - sub.l == 1;
                }
                if sub.l <= jm && jm < sub.r {
                    singleton_minus[j - 1] = sub.r - sub.l == 1;
                }
            }
        }
    }

    // The FD stencils revisit the same handful of sample points for every
    // index and side; memoize the eigensolves.
    let cache = std::cell::RefCell::new(std::collections::HashMap::<u64, Vec<f64>>::new());
    let curve = |tt: f64| -> Result<Vec<f64>> {
        if let Some(v) = cache.borrow().get(&tt.to_bits()) {
            return Ok(v.clone());
        }
        let v = fam.eigenvalues(tt, n)?;
        cache.borrow_mut().insert(tt.to_bits(), v.clone());
        Ok(v)
    };
    let mut check = PencilCheck {
        seed: fam.seed.unwrap_or(0),
        max_first_err: 0.0,
        max_second_rel_err: 0.0,
        max_gamma_err,
        fd_warnings: 0,
    };
    for j in 1..=n {
        for side in [Side::Plus, Side::Minus] {
            let d1 = match side {
                Side::Plus => data.d_plus[j - 1],
                Side::Minus => data.d_minus[j - 1],
            };
            let est = fd_first_derivative(&curve, t, j, fd, side)?;
            if !est.monotone {
                check.fd_warnings += 1;
            }
            check.max_first_err = check.max_first_err.max((est.value - d1).abs());

            let singleton = match side {
                Side::Plus => singleton_plus[j - 1],
                Side::Minus => singleton_minus[j - 1],
            };
            if singleton {
                let d2 = match side {
                    Side::Plus => data.d2_plus[j - 1],
                    Side::Minus => data.d2_minus[j - 1],
                };
                let est2 = fd_second_derivative(&curve, t, j, d1, fd, side)?;
                if !est2.monotone {
                    check.fd_warnings += 1;
                }
                let rel = (est2.value - d2).abs() / d2.abs().max(1.0);
                check.max_second_rel_err = check.max_second_rel_err.max(rel);
            }
        }
    }
    Ok(check)
}

/// Deterministic multiplicity plan for seed `i` of a batch: rotates through
/// a double, a triple, and two doubles.
pub fn batch_plan(seed: u64) -> Vec<PlannedCluster> {
    match seed % 3 {
        0 => vec![PlannedCluster { value: 2.0, multiplicity: 2 }],
        1 => vec![PlannedCluster { value: 1.5, multiplicity: 3 }],
        _ => vec![
            PlannedCluster { value: 1.0, multiplicity: 2 },
            PlannedCluster { value: 3.0, multiplicity: 2 },
        ],
    }
}

/// Generates and checks `count` random pencils in parallel; the dimension
/// cycles deterministically through `dim_lo..=dim_hi` and results are
/// ordered by seed regardless of scheduling.
pub fn pencil_batch(
    count: usize,
    dim_lo: usize,
    dim_hi: usize,
    base_seed: u64,
    fd: &FdConfig,
) -> Result<Vec<PencilCheck>> {
    if dim_lo == 0 || dim_lo > dim_hi {
        return Err(Error::InvalidParam(format!(
            "bad pencil dimension range {dim_lo}..={dim_hi}"
        )));
    }
    let span = (dim_hi - dim_lo + 1) as u64;
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i;
            let dim = dim_lo + (seed.wrapping_mul(7) % span) as usize;
            let fam = random_pencil(dim, seed, &batch_plan(seed), 1.0)?;
            check_pencil_derivatives(&fam, 0.0, fd)
        })
        .collect()
}
