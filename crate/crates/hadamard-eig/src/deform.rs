//! Domain deformation families and pullback coefficients.
//!
//! A deformation family `T_t` moves the reference domain; transporting the
//! Laplacian eigenproblem back to the fixed reference domain replaces the
//! constant coefficients by
//!
//! ```text
//! a_t = det F,        Q_t = F⁻¹ F⁻ᵀ,        F = DT_t,
//! ```
//!
//! so the stiffness integrand becomes `a_t Q_t[∇u, ∇v]` and the mass
//! integrand `a_t u v`. With `M = F⁻¹ Ḟ` and `K = F⁻¹ F̈` the t-derivatives
//! have the closed forms
//!
//! ```text
//! ȧ = a tr M
//! ä = a (tr²M − tr M² + tr K)
//! Q̇ = −(MQ + (MQ)ᵀ)
//! Q̈ = sym(2 M² Q) + 2 M Q Mᵀ − sym(K Q),      sym(X) = X + Xᵀ,
//! ```
//!
//! all of which are built here through the symmetric type [`Sym2`], so the
//! symmetry of `Q` and its derivatives is structural rather than numerical.
//!
//! Built-in families are affine in t, `T_t x = x + t W(x)`, with `W` either
//! one of three analytic fields (dilation, stretch_x, shear) or a nodal
//! field interpolated piecewise-linearly on a mesh. Non-affine families
//! enter through the callback constructor.

use std::sync::Arc;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Symmetric 2x2 matrix stored by its three independent entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub const ZERO: Sym2 = Sym2 { xx: 0.0, xy: 0.0, yy: 0.0 };
    pub const IDENTITY: Sym2 = Sym2 { xx: 1.0, xy: 0.0, yy: 1.0 };

    /// `X + Xᵀ` for a general 2x2 matrix.
    pub fn sym_of(x: &Matrix2<f64>) -> Sym2 {
        Sym2 {
            xx: 2.0 * x[(0, 0)],
            xy: x[(0, 1)] + x[(1, 0)],
            yy: 2.0 * x[(1, 1)],
        }
    }

    /// Reads off a product that is symmetric in exact arithmetic, storing the
    /// (0,1) entry once so the result is symmetric by construction.
    pub fn from_symmetric_product(x: &Matrix2<f64>) -> Sym2 {
        Sym2 { xx: x[(0, 0)], xy: x[(0, 1)], yy: x[(1, 1)] }
    }

    /// Quadratic form `g1ᵀ S g2`.
    pub fn apply(&self, g1: [f64; 2], g2: [f64; 2]) -> f64 {
        self.xx * g1[0] * g2[0] + self.xy * (g1[0] * g2[1] + g1[1] * g2[0]) + self.yy * g1[1] * g2[1]
    }

    pub fn to_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.xx, self.xy, self.xy, self.yy)
    }

    pub fn scale(&self, s: f64) -> Sym2 {
        Sym2 { xx: s * self.xx, xy: s * self.xy, yy: s * self.yy }
    }

    pub fn add(&self, o: &Sym2) -> Sym2 {
        Sym2 { xx: self.xx + o.xx, xy: self.xy + o.xy, yy: self.yy + o.yy }
    }

    pub fn sub(&self, o: &Sym2) -> Sym2 {
        Sym2 { xx: self.xx - o.xx, xy: self.xy - o.xy, yy: self.yy - o.yy }
    }
}

/// Jacobian data of a family at one point: `F = DT_t` and its first two
/// t-derivatives.
#[derive(Clone, Copy, Debug)]
pub struct Jacobian {
    pub f: Matrix2<f64>,
    pub f_dot: Matrix2<f64>,
    pub f_ddot: Matrix2<f64>,
}

/// Pullback coefficients and their first two t-derivatives at one point.
#[derive(Clone, Copy, Debug)]
pub struct PullbackCoeffs {
    pub a: f64,
    pub a_dot: f64,
    pub a_ddot: f64,
    pub q: Sym2,
    pub q_dot: Sym2,
    pub q_ddot: Sym2,
}

/// Velocity field `W` of an affine family `T_t x = x + t W(x)`.
#[derive(Clone, Debug)]
pub enum VelocityField {
    /// `W(x) = scale · x`.
    Dilation { scale: f64 },
    /// `W(x) = scale · (x₀, 0)`.
    StretchX { scale: f64 },
    /// `W(x) = scale · (x₁, 0)`.
    Shear { scale: f64 },
    /// Piecewise-linear field with the given vertex values on `mesh`.
    Nodal { mesh: Arc<Mesh>, values: Vec<[f64; 2]> },
}

/// Serializable velocity-field description.
///
/// ```json
/// {"kind": "analytic", "name": "dilation", "scale": 1.0}
/// {"kind": "nodal", "values": [[0.0, 0.0], ...]}
/// ```
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    Analytic { name: AnalyticName, scale: f64 },
    Nodal { values: Vec<[f64; 2]> },
}

/// Names of the built-in analytic fields.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum AnalyticName {
    Dilation,
    StretchX,
    Shear,
}

impl VelocityField {
    /// Resolves a serialized description; nodal fields attach to `mesh`.
    pub fn from_config(cfg: &FieldConfig, mesh: &Arc<Mesh>) -> Result<VelocityField> {
        match cfg {
            FieldConfig::Analytic { name, scale } => {
                if !scale.is_finite() {
                    return Err(Error::Config("field scale must be finite".into()));
                }
                Ok(match name {
                    AnalyticName::Dilation => VelocityField::Dilation { scale: *scale },
                    AnalyticName::StretchX => VelocityField::StretchX { scale: *scale },
                    AnalyticName::Shear => VelocityField::Shear { scale: *scale },
                })
            }
            FieldConfig::Nodal { values } => {
                if values.len() != mesh.n_vertices() {
                    return Err(Error::Config(format!(
                        "nodal field has {} values but the mesh has {} vertices",
                        values.len(),
                        mesh.n_vertices()
                    )));
                }
                Ok(VelocityField::Nodal { mesh: Arc::clone(mesh), values: values.clone() })
            }
        }
    }

    /// Value of `W` at `x` (`tri` short-circuits point location for nodal fields).
    pub fn eval(&self, x: [f64; 2], tri: Option<usize>) -> Result<[f64; 2]> {
        match self {
            VelocityField::Dilation { scale } => Ok([scale * x[0], scale * x[1]]),
            VelocityField::StretchX { scale } => Ok([scale * x[0], 0.0]),
            VelocityField::Shear { scale } => Ok([scale * x[1], 0.0]),
            VelocityField::Nodal { mesh, values } => {
                let t = self.resolve_triangle(mesh, x, tri)?;
                let [i, j, k] = mesh.triangles[t];
                let zeta = barycentric(&mesh.triangle_coords(t), x);
                Ok([
                    zeta[0] * values[i][0] + zeta[1] * values[j][0] + zeta[2] * values[k][0],
                    zeta[0] * values[i][1] + zeta[1] * values[j][1] + zeta[2] * values[k][1],
                ])
            }
        }
    }

    /// Gradient `DW` at `x`; constant for the analytic fields and per
    /// triangle for nodal fields.
    pub fn gradient(&self, x: [f64; 2], tri: Option<usize>) -> Result<Matrix2<f64>> {
        match self {
            VelocityField::Dilation { scale } => Ok(Matrix2::new(*scale, 0.0, 0.0, *scale)),
            VelocityField::StretchX { scale } => Ok(Matrix2::new(*scale, 0.0, 0.0, 0.0)),
            VelocityField::Shear { scale } => Ok(Matrix2::new(0.0, *scale, 0.0, 0.0)),
            VelocityField::Nodal { mesh, values } => {
                let t = self.resolve_triangle(mesh, x, tri)?;
                Ok(nodal_gradient(mesh, values, t))
            }
        }
    }

    fn resolve_triangle(&self, mesh: &Mesh, x: [f64; 2], tri: Option<usize>) -> Result<usize> {
        if let Some(t) = tri {
            return Ok(t);
        }
        locate_point(mesh, x).ok_or_else(|| {
            Error::InvalidParam(format!("point ({}, {}) lies outside the field's mesh", x[0], x[1]))
        })
    }
}

fn barycentric(corners: &[[f64; 2]; 3], x: [f64; 2]) -> [f64; 3] {
    let [p0, p1, p2] = corners;
    let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
    let l1 = ((x[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (x[1] - p0[1])) / det;
    let l2 = ((p1[0] - p0[0]) * (x[1] - p0[1]) - (x[0] - p0[0]) * (p1[1] - p0[1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

fn locate_point(mesh: &Mesh, x: [f64; 2]) -> Option<usize> {
    const TOL: f64 = -1e-12;
    (0..mesh.n_triangles()).find(|&t| {
        let zeta = barycentric(&mesh.triangle_coords(t), x);
        zeta.iter().all(|&z| z >= TOL)
    })
}

/// Gradient of the piecewise-linear interpolant on triangle `t`:
/// `DW = Σ_v W(v) ⊗ ∇ζ_v`.
fn nodal_gradient(mesh: &Mesh, values: &[[f64; 2]], t: usize) -> Matrix2<f64> {
    let [i, j, k] = mesh.triangles[t];
    let [p0, p1, p2] = mesh.triangle_coords(t);
    let twice_area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
    let grads = [
        [(p1[1] - p2[1]) / twice_area, (p2[0] - p1[0]) / twice_area],
        [(p2[1] - p0[1]) / twice_area, (p0[0] - p2[0]) / twice_area],
        [(p0[1] - p1[1]) / twice_area, (p1[0] - p0[0]) / twice_area],
    ];
    let mut dw = Matrix2::zeros();
    for (v, g) in [i, j, k].into_iter().zip(grads) {
        dw[(0, 0)] += values[v][0] * g[0];
        dw[(0, 1)] += values[v][0] * g[1];
        dw[(1, 0)] += values[v][1] * g[0];
        dw[(1, 1)] += values[v][1] * g[1];
    }
    dw
}

type MapFn = dyn Fn([f64; 2], f64) -> [f64; 2] + Send + Sync;
type JacFn = dyn Fn([f64; 2], f64) -> Jacobian + Send + Sync;

enum FamilyKind {
    Affine(VelocityField),
    Callbacks { map: Box<MapFn>, jac: Box<JacFn> },
}

/// A one-parameter deformation family with first and second t-derivatives.
pub struct DeformationFamily {
    kind: FamilyKind,
    t_range: (f64, f64),
}

impl DeformationFamily {
    /// Affine family `T_t x = x + t W(x)`; the validity range is the largest
    /// open interval around 0 on which `det DT_t` stays positive everywhere.
    pub fn affine(field: VelocityField) -> Result<DeformationFamily> {
        let t_range = affine_range(&field)?;
        Ok(DeformationFamily { kind: FamilyKind::Affine(field), t_range })
    }

    /// General family defined through callbacks; the caller vouches for
    /// `t_range`.
    pub fn from_callbacks(
        map: Box<MapFn>,
        jac: Box<JacFn>,
        t_range: (f64, f64),
    ) -> DeformationFamily {
        DeformationFamily { kind: FamilyKind::Callbacks { map, jac }, t_range }
    }

    /// Open interval of admissible parameters around 0.
    pub fn t_range(&self) -> (f64, f64) {
        self.t_range
    }

    /// True when `t` lies inside the validity range.
    pub fn contains(&self, t: f64) -> bool {
        t > self.t_range.0 && t < self.t_range.1
    }

    /// `T_t(x)`.
    pub fn map_eval(&self, x: [f64; 2], t: f64) -> Result<[f64; 2]> {
        match &self.kind {
            FamilyKind::Affine(field) => {
                let w = field.eval(x, None)?;
                Ok([x[0] + t * w[0], x[1] + t * w[1]])
            }
            FamilyKind::Callbacks { map, .. } => Ok(map(x, t)),
        }
    }

    /// `DT_t` and its first two t-derivatives at `x`.
    pub fn jac_eval(&self, x: [f64; 2], t: f64) -> Result<Jacobian> {
        self.jac_eval_in_tri(x, None, t)
    }

    /// Jacobian evaluation with a containing-triangle hint for nodal fields.
    pub(crate) fn jac_eval_in_tri(
        &self,
        x: [f64; 2],
        tri: Option<usize>,
        t: f64,
    ) -> Result<Jacobian> {
        match &self.kind {
            FamilyKind::Affine(field) => {
                let dw = field.gradient(x, tri)?;
                Ok(Jacobian {
                    f: Matrix2::identity() + dw * t,
                    f_dot: dw,
                    f_ddot: Matrix2::zeros(),
                })
            }
            FamilyKind::Callbacks { jac, .. } => Ok(jac(x, t)),
        }
    }
}

/// Builds the affine family for a velocity field (free-function form).
pub fn affine_family(field: VelocityField) -> Result<DeformationFamily> {
    DeformationFamily::affine(field)
}

/// Validity interval of `det(I + t DW) = 1 + t tr DW + t² det DW > 0`,
/// intersected over all (triangles of) the field.
fn affine_range(field: &VelocityField) -> Result<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut clamp = |dw: &Matrix2<f64>| {
        let (l, h) = positivity_interval(dw.determinant(), dw.trace());
        lo = lo.max(l);
        hi = hi.min(h);
    };
    match field {
        VelocityField::Nodal { mesh, values } => {
            if values.len() != mesh.n_vertices() {
                return Err(Error::InvalidParam(format!(
                    "nodal field has {} values but the mesh has {} vertices",
                    values.len(),
                    mesh.n_vertices()
                )));
            }
            for t in 0..mesh.n_triangles() {
                clamp(&nodal_gradient(mesh, values, t));
            }
        }
        _ => clamp(&field.gradient([0.0, 0.0], None)?),
    }
    Ok((lo, hi))
}

/// Largest interval around 0 on which `d t² + m t + 1 > 0`.
fn positivity_interval(d: f64, m: f64) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut consider = |root: f64| {
        if root > 0.0 {
            hi = hi.min(root);
        } else if root < 0.0 {
            lo = lo.max(root);
        } else {
            // Root at t = 0 means the family is degenerate immediately.
            lo = 0.0;
            hi = 0.0;
        }
    };
    if d.abs() < 1e-300 {
        if m.abs() > 1e-300 {
            consider(-1.0 / m);
        }
    } else {
        let disc = m * m - 4.0 * d;
        if disc >= 0.0 {
            let s = disc.sqrt();
            consider((-m - s) / (2.0 * d));
            consider((-m + s) / (2.0 * d));
        }
    }
    (lo, hi)
}

/// Pullback coefficients of `fam` at the point `x` and parameter `t`.
pub fn pullback_coeffs(fam: &DeformationFamily, x: [f64; 2], t: f64) -> Result<PullbackCoeffs> {
    pullback_coeffs_in_tri(fam, x, None, t)
}

/// Coefficient evaluation with a containing-triangle hint (assembly path).
pub(crate) fn pullback_coeffs_in_tri(
    fam: &DeformationFamily,
    x: [f64; 2],
    tri: Option<usize>,
    t: f64,
) -> Result<PullbackCoeffs> {
    if !fam.contains(t) {
        let (lo, hi) = fam.t_range();
        return Err(Error::OutOfRange { t, lo, hi });
    }
    let jac = fam.jac_eval_in_tri(x, tri, t)?;
    coeffs_from_jacobian(&jac, x, t)
}

/// Core coefficient algebra; fails on (near-)singular `F`.
fn coeffs_from_jacobian(jac: &Jacobian, x: [f64; 2], t: f64) -> Result<PullbackCoeffs> {
    let f = &jac.f;
    let det = f[(0, 0)] * f[(1, 1)] - f[(0, 1)] * f[(1, 0)];
    if det <= 1e-14 {
        return Err(Error::SingularDeformation { x, t, det });
    }
    let finv = Matrix2::new(f[(1, 1)], -f[(0, 1)], -f[(1, 0)], f[(0, 0)]) / det;

    // Q = F⁻¹ F⁻ᵀ entry by entry: symmetric by construction.
    let q = Sym2 {
        xx: finv[(0, 0)] * finv[(0, 0)] + finv[(0, 1)] * finv[(0, 1)],
        xy: finv[(0, 0)] * finv[(1, 0)] + finv[(0, 1)] * finv[(1, 1)],
        yy: finv[(1, 0)] * finv[(1, 0)] + finv[(1, 1)] * finv[(1, 1)],
    };
    let qm = q.to_matrix();

    let m = finv * jac.f_dot;
    let k = finv * jac.f_ddot;
    let tr_m = m.trace();
    let m2 = m * m;

    let a = det;
    let a_dot = a * tr_m;
    let a_ddot = a * (tr_m * tr_m - m2.trace() + k.trace());

    let q_dot = Sym2::sym_of(&(m * qm)).scale(-1.0);
    let q_ddot = Sym2::sym_of(&(m2 * qm * 2.0))
        .add(&Sym2::from_symmetric_product(&(m * qm * m.transpose())).scale(2.0))
        .sub(&Sym2::sym_of(&(k * qm)));

    Ok(PullbackCoeffs { a, a_dot, a_ddot, q, q_dot, q_ddot })
}
