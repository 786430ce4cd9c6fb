//! Cluster-wise first and second eigenvalue derivatives.
//!
//! Sampling the deformed eigenvalue problem at parameter `t` yields sorted
//! curves `λ_j(t)` that are only Lipschitz across multiplicity changes. This
//! module computes their one-sided derivatives from the pencil and its
//! t-derivative forms, without finite differences:
//!
//! * For a **cluster** `λ_{k-1} < λ_k = … = λ_{k+m-1} < λ_{k+m}` with
//!   B-orthonormal eigenbasis `φ_1, …, φ_m`, the matrix
//!   `G = [ (Ȧ − λḂ)(φ_i, φ_j) ]` has eigenvalues `ν_1 ≤ … ≤ ν_m`, and the
//!   one-sided derivatives pair up as
//!   `λ̇⁺_{k+q} = ν_{q+1}` and `λ̇⁻_{k+q} = ν_{m-q}`.
//! * For a **sub-cluster** of equal ν (`λ̇⁺_{l-1} < λ̇⁺_l = … = λ̇⁺_{r-1} <
//!   λ̇⁺_r`, common value λ′), each basis vector `u` gets a corrector `γ(u)`
//!   solving `C γ = −Ċ u` B-orthogonally to the cluster, where
//!   `C = A − λB`, `Ċ = Ȧ − λḂ − λ′B`; then
//!   `H = [ (Ä − λB̈ − 2λ′Ḃ)(φ_i, φ_j) − 2 C(γ_i, γ_j) ]`
//!   has eigenvalues `σ_1 ≤ … ≤ σ_{r-l}`, the one-sided second derivatives
//!   of the sub-cluster's branches (half-Taylor convention
//!   `λ_j(t+h) = λ + h λ̇ + h²/2 λ̈ + o(h²)`).
//!
//! Everything runs against the [`PencilForms`] abstraction, so the same code
//! serves sparse finite element bundles and dense synthetic pencils. For
//! shifted pure-Neumann bundles the machinery uses `λ̃ = λ + 1` against the
//! shifted forms; every derivative quantity is invariant under that shift.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assemble::{assemble_forms, FormBundle, FormSelector};
use crate::deform::DeformationFamily;
use crate::error::{Error, Result};
use crate::gevp::{solve_gevp, EigenPacket, SolveOptions};
use crate::mesh::Mesh;

/// Access to the six pencil forms shared by FEM bundles and dense pencils.
pub trait PencilForms {
    /// Pencil dimension.
    fn dim(&self) -> usize;
    /// Amount added to reported eigenvalues to obtain pencil eigenvalues
    /// (1 for `+B`-shifted pure-Neumann bundles, else 0).
    fn shift(&self) -> f64;
    /// Bilinear form `u_sel v`.
    fn bilinear(&self, sel: FormSelector, u: &DVector<f64>, v: &DVector<f64>) -> f64;
    /// Matrix-vector product with the selected form.
    fn matvec(&self, sel: FormSelector, x: &DVector<f64>) -> DVector<f64>;
    /// Dense copy of the selected form (used for factorizations).
    fn dense(&self, sel: FormSelector) -> DMatrix<f64>;
}

impl PencilForms for FormBundle {
    fn dim(&self) -> usize {
        self.n_free()
    }

    fn shift(&self) -> f64 {
        if self.shifted {
            1.0
        } else {
            0.0
        }
    }

    fn bilinear(&self, sel: FormSelector, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        self.form(sel)
            .bilinear(u.as_slice(), v.as_slice())
            .expect("dimension checked by caller")
    }

    fn matvec(&self, sel: FormSelector, x: &DVector<f64>) -> DVector<f64> {
        self.form(sel).matvec(x)
    }

    fn dense(&self, sel: FormSelector) -> DMatrix<f64> {
        self.form(sel).to_dense()
    }
}

/// Dense six-matrix pencil (synthetic or projected problems).
#[derive(Clone, Debug)]
pub struct DensePencil {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub a_dot: DMatrix<f64>,
    pub b_dot: DMatrix<f64>,
    pub a_ddot: DMatrix<f64>,
    pub b_ddot: DMatrix<f64>,
}

impl DensePencil {
    fn select(&self, sel: FormSelector) -> &DMatrix<f64> {
        match sel {
            FormSelector::A => &self.a,
            FormSelector::B => &self.b,
            FormSelector::ADot => &self.a_dot,
            FormSelector::BDot => &self.b_dot,
            FormSelector::ADdot => &self.a_ddot,
            FormSelector::BDdot => &self.b_ddot,
        }
    }
}

impl PencilForms for DensePencil {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn shift(&self) -> f64 {
        0.0
    }

    fn bilinear(&self, sel: FormSelector, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        u.dot(&(self.select(sel) * v))
    }

    fn matvec(&self, sel: FormSelector, x: &DVector<f64>) -> DVector<f64> {
        self.select(sel) * x
    }

    fn dense(&self, sel: FormSelector) -> DMatrix<f64> {
        self.select(sel).clone()
    }
}

/// A maximal run of numerically equal eigenvalues.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cluster {
    /// 1-based index of the first member.
    pub k: usize,
    /// Multiplicity.
    pub m: usize,
    /// Common eigenvalue (mean of the members).
    pub lambda: f64,
}

/// Groups ascending values into clusters: adjacent values belong together
/// when `|λ_{i+1} − λ_i| ≤ rel_tol · max(1, |λ_i|)`. The returned ranges
/// partition `1..=values.len()`.
pub fn detect_clusters(values: &[f64], rel_tol: f64) -> Vec<Cluster> {
    let mut out = Vec::new();
    let mut start = 0usize;
    for i in 0..values.len() {
        let last = i + 1 == values.len();
        let boundary = last
            || (values[i + 1] - values[i]).abs() > rel_tol * values[i].abs().max(1.0);
        if boundary {
            let members = &values[start..=i];
            let lambda = members.iter().sum::<f64>() / members.len() as f64;
            out.push(Cluster { k: start + 1, m: members.len(), lambda });
            start = i + 1;
        }
    }
    out
}

/// First-derivative data of one cluster.
#[derive(Clone, Debug)]
pub struct FirstOrderResult {
    pub cluster: Cluster,
    /// Ascending eigenvalues of the cluster matrix G.
    pub nu: Vec<f64>,
    /// B-orthonormal cluster basis rotated to diagonalize G (one column per
    /// member, ordered like `nu`).
    pub rotated_basis: DMatrix<f64>,
}

impl FirstOrderResult {
    /// Right derivative `λ̇⁺_j` for a 1-based global index in the cluster.
    pub fn d_plus(&self, j: usize) -> f64 {
        self.nu[j - self.cluster.k]
    }

    /// Left derivative `λ̇⁻_j` (the pairing reverses the order of ν).
    pub fn d_minus(&self, j: usize) -> f64 {
        self.nu[self.cluster.m - 1 - (j - self.cluster.k)]
    }
}

/// First derivatives of a cluster from a solved eigenpacket.
pub fn first_derivatives<P: PencilForms>(
    forms: &P,
    packet: &EigenPacket,
    cluster: &Cluster,
) -> Result<FirstOrderResult> {
    if packet.dim != forms.dim() {
        return Err(Error::DimensionMismatch(format!(
            "packet dimension {} vs pencil dimension {}",
            packet.dim,
            forms.dim()
        )));
    }
    if cluster.k == 0 || cluster.k + cluster.m - 1 > packet.values.len() {
        return Err(Error::InvalidParam(format!(
            "cluster [{}, {}) outside the solved range 1..={}",
            cluster.k,
            cluster.k + cluster.m,
            packet.values.len()
        )));
    }
    let basis = packet.vectors.columns(cluster.k - 1, cluster.m).clone_owned();
    first_derivatives_from_basis(forms, cluster.lambda, &basis, cluster.k)
}

/// First derivatives from an explicit B-orthonormal basis of the eigenspace.
///
/// `lambda` is the reported (un-shifted) cluster eigenvalue and `k` its
/// 1-based position. The result does not depend on the basis choice.
pub fn first_derivatives_from_basis<P: PencilForms>(
    forms: &P,
    lambda: f64,
    basis: &DMatrix<f64>,
    k: usize,
) -> Result<FirstOrderResult> {
    let m = basis.ncols();
    if m == 0 || basis.nrows() != forms.dim() {
        return Err(Error::DimensionMismatch(format!(
            "cluster basis of shape {}x{} for pencil dimension {}",
            basis.nrows(),
            m,
            forms.dim()
        )));
    }
    let lam_t = lambda + forms.shift();
    let cols: Vec<DVector<f64>> = (0..m).map(|j| basis.column(j).clone_owned()).collect();
    let mut g = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let e = forms.bilinear(FormSelector::ADot, &cols[i], &cols[j])
                - lam_t * forms.bilinear(FormSelector::BDot, &cols[i], &cols[j]);
            g[(i, j)] = e;
            g[(j, i)] = e;
        }
    }
    let eig = g.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let nu: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut s = DMatrix::zeros(m, m);
    for (col, &idx) in order.iter().enumerate() {
        s.set_column(col, &eig.eigenvectors.column(idx));
    }
    let rotated = basis * s;
    Ok(FirstOrderResult {
        cluster: Cluster { k, m, lambda },
        nu,
        rotated_basis: rotated,
    })
}

/// Factorization of the bordered corrector system of one cluster.
///
/// Solves, for each right-hand side `u` and sub-cluster derivative λ′,
///
/// ```text
/// [ C    B Y ] [ w ]   [ −(Ȧ − λḂ − λ′B) u ]
/// [ YᵀB   0  ] [ μ ] = [          0         ]
/// ```
///
/// where `Y` is the cluster basis; the constraint pins `w` B-orthogonal to
/// the eigenspace. Since the right-hand side is B-orthogonal to the
/// eigenspace whenever λ′ is the eigenvector's own ν, the multiplier μ
/// vanishes and `w` solves the unconstrained equation as well.
pub struct GammaSolver {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
    m: usize,
    lam_t: f64,
}

impl GammaSolver {
    /// Builds and factors the bordered matrix for a cluster with reported
    /// eigenvalue `lambda` and B-orthonormal basis `basis`.
    pub fn new<P: PencilForms>(forms: &P, basis: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        let n = forms.dim();
        let m = basis.ncols();
        if basis.nrows() != n || m == 0 {
            return Err(Error::DimensionMismatch(format!(
                "cluster basis of shape {}x{} for pencil dimension {n}",
                basis.nrows(),
                m
            )));
        }
        let lam_t = lambda + forms.shift();
        let c = forms.dense(FormSelector::A) - forms.dense(FormSelector::B) * lam_t;
        let mut by = DMatrix::zeros(n, m);
        for j in 0..m {
            by.set_column(j, &forms.matvec(FormSelector::B, &basis.column(j).clone_owned()));
        }
        let mut big = DMatrix::zeros(n + m, n + m);
        big.view_mut((0, 0), (n, n)).copy_from(&c);
        big.view_mut((0, n), (n, m)).copy_from(&by);
        big.view_mut((n, 0), (m, n)).copy_from(&by.transpose());
        let lu = big.lu();
        let diag = lu.u().map_diagonal(|d| d.abs());
        let (mut min_p, mut max_p) = (f64::INFINITY, 0.0f64);
        for d in diag.iter() {
            min_p = min_p.min(*d);
            max_p = max_p.max(*d);
        }
        if !(min_p > 1e-14 * max_p) {
            return Err(Error::SingularSystem { pivot: min_p });
        }
        Ok(GammaSolver { lu, n, m, lam_t })
    }

    /// Corrector `γ(u)` and constraint multiplier μ for one basis vector.
    pub fn solve<P: PencilForms>(
        &self,
        forms: &P,
        u: &DVector<f64>,
        lambda_prime: f64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if u.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side of length {} for corrector dimension {}",
                u.len(),
                self.n
            )));
        }
        let cdot_u = forms.matvec(FormSelector::ADot, u)
            - forms.matvec(FormSelector::BDot, u) * self.lam_t
            - forms.matvec(FormSelector::B, u) * lambda_prime;
        let mut rhs = DVector::zeros(self.n + self.m);
        rhs.rows_mut(0, self.n).copy_from(&(-&cdot_u));
        let sol = self
            .lu
            .solve(&rhs)
            .ok_or(Error::SingularSystem { pivot: 0.0 })?;
        let w = sol.rows(0, self.n).clone_owned();
        let mu = sol.rows(self.n, self.m).clone_owned();
        Ok((w, mu))
    }
}

/// One-shot corrector solve (see [`GammaSolver`] for the system).
pub fn solve_gamma<P: PencilForms>(
    forms: &P,
    basis: &DMatrix<f64>,
    lambda: f64,
    lambda_prime: f64,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    let solver = GammaSolver::new(forms, basis, lambda)?;
    Ok(solver.solve(forms, u, lambda_prime)?.0)
}

/// Second-derivative data of one sub-cluster.
#[derive(Clone, Debug)]
pub struct SecondOrderResult {
    /// 1-based global index of the first sub-cluster member.
    pub l: usize,
    /// One past the last member, so the sub-cluster covers `l..r-1`
    /// inclusively and has `r - l` members.
    pub r: usize,
    /// Common first derivative of the sub-cluster.
    pub lambda_prime: f64,
    /// Ascending eigenvalues of the sub-cluster matrix H: the one-sided
    /// second derivatives.
    pub sigma: Vec<f64>,
    /// Correctors `γ(φ̃_i)`, one column per member.
    pub gamma: DMatrix<f64>,
}

/// Second derivatives for every sub-cluster of a cluster.
///
/// Sub-clusters are maximal runs of ν equal within `deriv_tol` (absolute).
pub fn second_derivatives<P: PencilForms>(
    forms: &P,
    first: &FirstOrderResult,
    deriv_tol: f64,
) -> Result<Vec<SecondOrderResult>> {
    let m = first.cluster.m;
    let lam_t = first.cluster.lambda + forms.shift();
    let solver = GammaSolver::new(forms, &first.rotated_basis, first.cluster.lambda)?;

    let mut out = Vec::new();
    let mut i0 = 0usize;
    while i0 < m {
        let mut i1 = i0 + 1;
        while i1 < m && (first.nu[i1] - first.nu[i1 - 1]).abs() <= deriv_tol {
            i1 += 1;
        }
        let size = i1 - i0;
        let lambda_prime = first.nu[i0..i1].iter().sum::<f64>() / size as f64;

        let phis: Vec<DVector<f64>> = (i0..i1)
            .map(|i| first.rotated_basis.column(i).clone_owned())
            .collect();
        let mut gamma = DMatrix::zeros(forms.dim(), size);
        for (col, phi) in phis.iter().enumerate() {
            let (w, _mu) = solver.solve(forms, phi, lambda_prime)?;
            gamma.set_column(col, &w);
        }

        let c_of = |u: &DVector<f64>, v: &DVector<f64>| {
            forms.bilinear(FormSelector::A, u, v) - lam_t * forms.bilinear(FormSelector::B, u, v)
        };
        let mut h = DMatrix::zeros(size, size);
        for p in 0..size {
            for q in p..size {
                let head = forms.bilinear(FormSelector::ADdot, &phis[p], &phis[q])
                    - lam_t * forms.bilinear(FormSelector::BDdot, &phis[p], &phis[q])
                    - 2.0 * lambda_prime * forms.bilinear(FormSelector::BDot, &phis[p], &phis[q]);
                let gp = gamma.column(p).clone_owned();
                let gq = gamma.column(q).clone_owned();
                let val = head - 2.0 * c_of(&gp, &gq);
                h[(p, q)] = val;
                h[(q, p)] = val;
            }
        }
        let mut sigma: Vec<f64> = h.symmetric_eigen().eigenvalues.iter().copied().collect();
        sigma.sort_by(|a, b| a.partial_cmp(b).unwrap());

        out.push(SecondOrderResult {
            l: first.cluster.k + i0,
            r: first.cluster.k + i1,
            lambda_prime,
            sigma,
            gamma,
        });
        i0 = i1;
    }
    Ok(out)
}

/// Tolerances used throughout a sensitivity computation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Tolerances {
    /// Relative eigenvalue clustering tolerance (floored at scale 1).
    pub cluster_rel_tol: f64,
    /// Absolute ν sub-clustering tolerance.
    pub deriv_tol: f64,
    /// Eigensolver relative residual bound.
    pub solver_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { cluster_rel_tol: 1e-8, deriv_tol: 1e-6, solver_tol: 1e-10 }
    }
}

/// Serializable sensitivity report: eigenvalues, clusters, ν, sub-clusters,
/// λ′, σ, and the tolerances that produced them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub t: f64,
    pub eigenvalues: Vec<f64>,
    pub clusters: Vec<ClusterReport>,
    pub tolerances: Tolerances,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub m: usize,
    pub lambda: f64,
    pub nu: Vec<f64>,
    pub subclusters: Vec<SubclusterReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubclusterReport {
    pub l: usize,
    pub r: usize,
    pub lambda_prime: f64,
    pub sigma: Vec<f64>,
}

/// Per-index unilateral derivative data recovered from a report.
#[derive(Clone, Debug)]
pub struct BranchData {
    pub lambda: Vec<f64>,
    pub d_plus: Vec<f64>,
    pub d_minus: Vec<f64>,
    pub d2_plus: Vec<f64>,
    pub d2_minus: Vec<f64>,
}

impl SensitivityReport {
    /// Expands the cluster data into per-index one-sided derivatives.
    ///
    /// Right derivatives read ν in ascending order; left derivatives read it
    /// reversed. Second derivatives follow the same reflection applied to
    /// sub-clusters: the left-side value at index `j` is the σ of the
    /// sub-cluster mirrored around the cluster center.
    pub fn branch_data(&self) -> BranchData {
        let n = self.eigenvalues.len();
        let mut out = BranchData {
            lambda: self.eigenvalues.clone(),
            d_plus: vec![f64::NAN; n],
            d_minus: vec![f64::NAN; n],
            d2_plus: vec![f64::NAN; n],
            d2_minus: vec![f64::NAN; n],
        };
        for cl in &self.clusters {
            for j in cl.k..cl.k + cl.m {
                let q = j - cl.k;
                out.d_plus[j - 1] = cl.nu[q];
                out.d_minus[j - 1] = cl.nu[cl.m - 1 - q];
                for sub in &cl.subclusters {
                    if sub.l <= j && j < sub.r {
                        out.d2_plus[j - 1] = sub.sigma[j - sub.l];
                    }
                    // Mirror of j around the cluster center.
                    let jm = 2 * cl.k + cl.m - 1 - j;
                    if sub.l <= jm && jm < sub.r {
                        let l_mirror = 2 * cl.k + cl.m - sub.r;
                        out.d2_minus[j - 1] = sub.sigma[j - l_mirror];
                    }
                }
            }
        }
        out
    }
}

/// Assembles, solves, and differentiates: the full sensitivity report at
/// parameter `t` covering eigenvalue indices `1..=k_max` (extended to the
/// end of the cluster containing `k_max`).
pub fn full_report(
    mesh: &Mesh,
    fam: &DeformationFamily,
    t: f64,
    k_max: usize,
    tols: &Tolerances,
) -> Result<SensitivityReport> {
    if k_max == 0 {
        return Err(Error::InvalidParam("k_max must be at least 1".into()));
    }
    let bundle = assemble_forms(mesh, fam, t)?;
    let n = bundle.n_free();
    if k_max > n {
        return Err(Error::InvalidParam(format!(
            "k_max = {k_max} exceeds the pencil dimension {n}"
        )));
    }
    let opts = SolveOptions { tol: tols.solver_tol, ..SolveOptions::default() };

    // Solve with a guard band so the gap above the last cluster is visible;
    // widen when a cluster runs into the end of the solved window.
    let mut guard = 4usize;
    loop {
        let k_solve = (k_max + guard).min(n);
        let packet = solve_gevp(&bundle, k_solve, &opts)?;
        let clusters = detect_clusters(&packet.values, tols.cluster_rel_tol);
        let chosen: Vec<Cluster> =
            clusters.into_iter().take_while(|cl| cl.k <= k_max).collect();
        let end = chosen.last().map(|cl| cl.k + cl.m - 1).unwrap_or(0);
        if end == k_solve && k_solve < n {
            guard *= 4;
            continue;
        }

        let mut cluster_reports = Vec::with_capacity(chosen.len());
        for cl in &chosen {
            let first = first_derivatives(&bundle, &packet, cl)?;
            let seconds = second_derivatives(&bundle, &first, tols.deriv_tol)?;
            cluster_reports.push(ClusterReport {
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
        return Ok(SensitivityReport {
            t,
            eigenvalues: packet.values[..end].to_vec(),
            clusters: cluster_reports,
            tolerances: *tols,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::{affine_family, VelocityField};
    use crate::mesh::{all_dirichlet, all_neumann, generate_rect_mesh};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detect_clusters_groups_with_relative_floor() {
        let clusters = detect_clusters(&[1.0, 1.0 + 5e-9, 2.0], 1e-8);
        assert_eq!(clusters.len(), 2);
        assert_eq!((clusters[0].k, clusters[0].m), (1, 2));
        assert_eq!((clusters[1].k, clusters[1].m), (3, 1));
        // At scale 100 the tolerance stretches with the value.
        let big = detect_clusters(&[100.0, 100.0 + 5e-7], 1e-8);
        assert_eq!(big.len(), 1);
        assert_eq!(big[0].m, 2);
    }

    proptest! {
        #[test]
        fn detected_clusters_partition_the_index_range(
            mut vals in proptest::collection::vec(-10.0f64..10.0, 1..20)
        ) {
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let clusters = detect_clusters(&vals, 1e-3);
            let mut next = 1usize;
            for cl in &clusters {
                prop_assert_eq!(cl.k, next);
                prop_assert!(cl.m >= 1);
                next += cl.m;
            }
            prop_assert_eq!(next, vals.len() + 1);
        }
    }

    fn dilation() -> crate::deform::DeformationFamily {
        affine_family(VelocityField::Dilation { scale: 1.0 }).unwrap()
    }

    #[test]
    fn dilation_scaling_laws_hold_exactly() {
        // λ(t) = λ(0)/(1+t)² for every discrete eigenvalue, so ν = −2λ and
        // σ = 6λ must come out of the cluster machinery to solver accuracy.
        let mesh = generate_rect_mesh(8, 8, 1.0, 1.0, all_dirichlet).unwrap();
        let report = full_report(&mesh, &dilation(), 0.0, 4, &Tolerances::default()).unwrap();
        assert!(report.eigenvalues.len() >= 4);
        for cl in &report.clusters {
            for (q, &nu) in cl.nu.iter().enumerate() {
                let want = -2.0 * cl.lambda;
                assert!(
                    (nu - want).abs() <= 1e-9 * want.abs(),
                    "cluster k={} ν_{q}: got {nu}, want {want}",
                    cl.k
                );
            }
            for sub in &cl.subclusters {
                for &sig in &sub.sigma {
                    let want = 6.0 * cl.lambda;
                    assert!(
                        (sig - want).abs() <= 1e-9 * want.abs(),
                        "cluster k={} σ: got {sig}, want {want}",
                        cl.k
                    );
                }
            }
        }
    }

    fn stretch_cluster_setup() -> (FormBundle, EigenPacket, Cluster) {
        let mesh = generate_rect_mesh(8, 8, 1.0, 1.0, all_dirichlet).unwrap();
        let fam = affine_family(VelocityField::StretchX { scale: 1.0 }).unwrap();
        let bundle = assemble_forms(&mesh, &fam, 0.0).unwrap();
        let packet = solve_gevp(&bundle, 6, &SolveOptions::default()).unwrap();
        let clusters = detect_clusters(&packet.values, 1e-8);
        let cl = clusters.iter().find(|c| c.m == 2).copied().expect("double cluster");
        (bundle, packet, cl)
    }

    #[test]
    fn corrector_satisfies_constraint_and_unconstrained_equation() {
        let (bundle, packet, cl) = stretch_cluster_setup();
        let first = first_derivatives(&bundle, &packet, &cl).unwrap();
        let solver = GammaSolver::new(&bundle, &first.rotated_basis, cl.lambda).unwrap();
        let lam_t = cl.lambda + bundle.shift();
        for i in 0..2 {
            let phi = first.rotated_basis.column(i).clone_owned();
            let (w, mu) = solver.solve(&bundle, &phi, first.nu[i]).unwrap();
            // Constraint: B-orthogonal to the cluster.
            for j in 0..2 {
                let y = first.rotated_basis.column(j).clone_owned();
                let overlap = bundle.bilinear(FormSelector::B, &w, &y);
                assert!(overlap.abs() < 1e-9, "B-orthogonality defect {overlap:.3e}");
            }
            // The multiplier vanishes because the right-hand side is
            // B-orthogonal to the eigenspace when λ' is the vector's own ν.
            assert!(mu.amax() < 1e-6, "multiplier {:.3e}", mu.amax());
            // Unconstrained residual (C w + Ċ u ≈ 0).
            let cw = bundle.matvec(FormSelector::A, &w) - bundle.matvec(FormSelector::B, &w) * lam_t;
            let cdot_u = bundle.matvec(FormSelector::ADot, &phi)
                - bundle.matvec(FormSelector::BDot, &phi) * lam_t
                - bundle.matvec(FormSelector::B, &phi) * first.nu[i];
            let res = (&cw + &cdot_u).amax();
            let scale = cdot_u.amax().max(1.0);
            assert!(res < 1e-6 * scale, "unconstrained residual {res:.3e}");
        }
    }

    #[test]
    fn textbook_perturbation_sums_match_pencil_machinery() {
        // Linear pencil A0 + t A1 with B = I and simple spectrum:
        // λ̇_j = ⟨u_j, A1 u_j⟩ and λ̈_j = 2 Σ_{i≠j} ⟨u_i, A1 u_j⟩²/(λ_j−λ_i).
        let n = 6;
        let lam0 = [0.5, 1.1, 1.9, 2.6, 3.4, 4.1];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
        let a1 = (&raw + raw.transpose()) * 0.5;
        let a0 = DMatrix::from_diagonal(&DVector::from_row_slice(&lam0));
        let eye = DMatrix::identity(n, n);
        let zero = DMatrix::zeros(n, n);
        let pencil = DensePencil {
            a: a0.clone(),
            b: eye.clone(),
            a_dot: a1.clone(),
            b_dot: zero.clone(),
            a_ddot: zero.clone(),
            b_ddot: zero.clone(),
        };
        let (vals, vecs, _) = crate::gevp::solve_dense_pair(&a0, &eye, n, 1e-10).unwrap();
        for j in 0..n {
            let basis = vecs.columns(j, 1).clone_owned();
            let first = first_derivatives_from_basis(&pencil, vals[j], &basis, j + 1).unwrap();
            let uj = vecs.column(j).clone_owned();
            let want_nu = uj.dot(&(&a1 * &uj));
            assert!((first.nu[0] - want_nu).abs() < 1e-12);

            let second = second_derivatives(&pencil, &first, 1e-6).unwrap();
            assert_eq!(second.len(), 1);
            let mut want_sigma = 0.0;
            for i in 0..n {
                if i != j {
                    let ui = vecs.column(i).clone_owned();
                    let coupling = ui.dot(&(&a1 * &uj));
                    want_sigma += 2.0 * coupling * coupling / (vals[j] - vals[i]);
                }
            }
            let got = second[0].sigma[0];
            assert!(
                (got - want_sigma).abs() < 1e-9 * (1.0 + want_sigma.abs()),
                "σ_{j}: got {got}, want {want_sigma}"
            );
        }
    }

    #[test]
    fn results_are_independent_of_the_cluster_basis() {
        let (bundle, packet, cl) = stretch_cluster_setup();
        let first = first_derivatives(&bundle, &packet, &cl).unwrap();
        let second = second_derivatives(&bundle, &first, 1e-6).unwrap();
        let sigmas: Vec<f64> = second.iter().flat_map(|s| s.sigma.clone()).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let raw = DMatrix::from_fn(cl.m, cl.m, |_, _| rng.gen::<f64>() - 0.5);
            let q = raw.qr().q();
            let rotated = packet.vectors.columns(cl.k - 1, cl.m).clone_owned() * q;
            let first_r =
                first_derivatives_from_basis(&bundle, cl.lambda, &rotated, cl.k).unwrap();
            for (a, b) in first.nu.iter().zip(&first_r.nu) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "ν {a} vs {b}");
            }
            let second_r = second_derivatives(&bundle, &first_r, 1e-6).unwrap();
            let sigmas_r: Vec<f64> = second_r.iter().flat_map(|s| s.sigma.clone()).collect();
            for (a, b) in sigmas.iter().zip(&sigmas_r) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "σ {a} vs {b}");
            }
        }
    }

    #[test]
    fn shifted_and_deflated_neumann_pencils_agree() {
        // Pure-Neumann dilation: the bundle path works on the +B shift; the
        // reference path deflates the constant mode from the unshifted
        // pencil and runs the same machinery on the projected dense pencil.
        let mesh = generate_rect_mesh(8, 8, 1.0, 1.0, all_neumann).unwrap();
        let bundle = assemble_forms(&mesh, &dilation(), 0.0).unwrap();
        let packet = solve_gevp(&bundle, 5, &SolveOptions::default()).unwrap();
        let clusters = detect_clusters(&packet.values, 1e-8);
        let cl = clusters[1]; // first nonzero eigenvalue, double (cos πx / cos πy)
        assert_eq!(cl.m, 2);
        let first = first_derivatives(&bundle, &packet, &cl).unwrap();
        let second = second_derivatives(&bundle, &first, 1e-6).unwrap();

        let n = bundle.n_free();
        let b = bundle.b.to_dense();
        let a_un = bundle.a.to_dense() - &b;
        let ad_un = bundle.a_dot.to_dense() - bundle.b_dot.to_dense();
        let add_un = bundle.a_ddot.to_dense() - bundle.b_ddot.to_dense();
        let one = DVector::from_element(n, 1.0);
        let b_one = &b * &one;
        let denom = b_one.dot(&one);
        let mut z = DMatrix::zeros(n, n - 1);
        for i in 1..n {
            let mut col = DVector::zeros(n);
            col[i] = 1.0;
            col.axpy(-b_one[i] / denom, &one, 1.0);
            z.set_column(i - 1, &col);
        }
        let proj = |mat: &DMatrix<f64>| z.transpose() * mat * &z;
        let pencil = DensePencil {
            a: proj(&a_un),
            b: proj(&b),
            a_dot: proj(&ad_un),
            b_dot: proj(&bundle.b_dot.to_dense()),
            a_ddot: proj(&add_un),
            b_ddot: proj(&bundle.b_ddot.to_dense()),
        };
        let (vals, vecs, _) = crate::gevp::solve_dense_pair(&pencil.a, &pencil.b, 4, 1e-9).unwrap();
        // Constant mode removed: the double π² pair now leads the spectrum.
        assert!((vals[0] - cl.lambda).abs() < 1e-8 * cl.lambda);
        assert!((vals[1] - cl.lambda).abs() < 1e-8 * cl.lambda);
        let basis = vecs.columns(0, 2).clone_owned();
        let first_d = first_derivatives_from_basis(&pencil, cl.lambda, &basis, 1).unwrap();
        let second_d = second_derivatives(&pencil, &first_d, 1e-6).unwrap();

        for (a, b) in first.nu.iter().zip(&first_d.nu) {
            assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()), "ν: shifted {a} vs deflated {b}");
        }
        let s1: Vec<f64> = second.iter().flat_map(|s| s.sigma.clone()).collect();
        let s2: Vec<f64> = second_d.iter().flat_map(|s| s.sigma.clone()).collect();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()), "σ: shifted {a} vs deflated {b}");
        }
    }

    #[test]
    fn report_schema_is_stable() {
        let mesh = generate_rect_mesh(4, 4, 1.0, 1.0, all_dirichlet).unwrap();
        let report = full_report(&mesh, &dilation(), 0.0, 3, &Tolerances::default()).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        let obj = json.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["clusters", "eigenvalues", "t", "tolerances"]);
        let cl = json["clusters"][0].as_object().unwrap();
        let mut ckeys: Vec<&str> = cl.keys().map(|s| s.as_str()).collect();
        ckeys.sort_unstable();
        assert_eq!(ckeys, ["k", "lambda", "m", "nu", "subclusters"]);
        let sub = json["clusters"][0]["subclusters"][0].as_object().unwrap();
        let mut skeys: Vec<&str> = sub.keys().map(|s| s.as_str()).collect();
        skeys.sort_unstable();
        assert_eq!(skeys, ["l", "lambda_prime", "r", "sigma"]);
        let back: SensitivityReport = serde_json::from_value(json).unwrap();
        assert_eq!(back.eigenvalues.len(), report.eigenvalues.len());
    }

    #[test]
    fn report_extends_through_a_straddled_cluster() {
        // k_max = 2 lands inside the double 5π² pair; the report must carry
        // the full cluster.
        let mesh = generate_rect_mesh(8, 8, 1.0, 1.0, all_dirichlet).unwrap();
        let report = full_report(&mesh, &dilation(), 0.0, 2, &Tolerances::default()).unwrap();
        assert_eq!(report.eigenvalues.len(), 3);
        let last = report.clusters.last().unwrap();
        assert_eq!((last.k, last.m), (2, 2));
    }

    #[test]
    fn branch_data_mirrors_derivatives_correctly() {
        let report = SensitivityReport {
            t: 0.0,
            eigenvalues: vec![5.0, 5.0],
            clusters: vec![ClusterReport {
                k: 1,
                m: 2,
                lambda: 5.0,
                nu: vec![-8.0, -2.0],
                subclusters: vec![
                    SubclusterReport { l: 1, r: 2, lambda_prime: -8.0, sigma: vec![24.0] },
                    SubclusterReport { l: 2, r: 3, lambda_prime: -2.0, sigma: vec![6.0] },
                ],
            }],
            tolerances: Tolerances::default(),
        };
        let data = report.branch_data();
        assert_eq!(data.d_plus, vec![-8.0, -2.0]);
        assert_eq!(data.d_minus, vec![-2.0, -8.0]);
        assert_eq!(data.d2_plus, vec![24.0, 6.0]);
        // Leftward, index 1 continues the ν=−2 branch and index 2 the ν=−8 one.
        assert_eq!(data.d2_minus, vec![6.0, 24.0]);
    }
}
