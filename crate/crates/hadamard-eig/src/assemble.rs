//! P1 finite element assembly of the pulled-back forms and their
//! t-derivatives.
//!
//! For a mesh of the reference domain and a deformation family, this module
//! assembles six sparse symmetric matrices on the free (non-Dirichlet)
//! vertices:
//!
//! ```text
//! A   : ∫ a Q[∇u, ∇v]              B   : ∫ a u v
//! Ȧ   : ∫ (a Q̇ + ȧ Q)[∇u, ∇v]      Ḃ   : ∫ ȧ u v
//! Ä   : ∫ (a Q̈ + 2 ȧ Q̇ + ä Q)[∇u, ∇v]   B̈ : ∫ ä u v
//! ```
//!
//! When the mesh has no Dirichlet edge the operator has a zero mode, so the
//! bundle stores the shifted forms `A + B`, `Ȧ + Ḃ`, `Ä + B̈` instead and
//! records `shifted = true`; eigenvalues of the shifted pencil are `λ + 1`
//! and every derivative quantity downstream is invariant under the shift.
//!
//! Assembly order is deterministic: triangles in index order, quadrature
//! points in rule order, and both members of each off-diagonal pair receive
//! the same contribution sequence, so the matrices are bitwise symmetric.

use crate::deform::{pullback_coeffs_in_tri, DeformationFamily};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::quadrature::{TriQuadrature, DEGREE4};
use crate::sparse::CsrMatrix;

/// Selects one of the six assembled forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormSelector {
    A,
    B,
    ADot,
    BDot,
    ADdot,
    BDdot,
}

/// The six assembled forms plus the free-vertex bookkeeping.
#[derive(Clone, Debug)]
pub struct FormBundle {
    pub a: CsrMatrix,
    pub b: CsrMatrix,
    pub a_dot: CsrMatrix,
    pub b_dot: CsrMatrix,
    pub a_ddot: CsrMatrix,
    pub b_ddot: CsrMatrix,
    /// Vertex index -> free-DOF index (None for Dirichlet vertices).
    pub free_dof_map: Vec<Option<usize>>,
    /// Free-DOF index -> vertex index.
    pub free_vertices: Vec<usize>,
    /// True when the pure-Neumann `+B` shift has been applied to A, Ȧ, Ä.
    pub shifted: bool,
    /// Parameter at which the forms were assembled.
    pub t: f64,
}

impl FormBundle {
    /// Number of free degrees of freedom.
    pub fn n_free(&self) -> usize {
        self.free_vertices.len()
    }

    /// The selected form matrix.
    pub fn form(&self, sel: FormSelector) -> &CsrMatrix {
        match sel {
            FormSelector::A => &self.a,
            FormSelector::B => &self.b,
            FormSelector::ADot => &self.a_dot,
            FormSelector::BDot => &self.b_dot,
            FormSelector::ADdot => &self.a_ddot,
            FormSelector::BDdot => &self.b_ddot,
        }
    }

    /// Restriction of a per-vertex vector to the free DOFs.
    pub fn restrict(&self, per_vertex: &[f64]) -> Result<Vec<f64>> {
        if per_vertex.len() != self.free_dof_map.len() {
            return Err(Error::DimensionMismatch(format!(
                "vertex vector of length {} for a mesh with {} vertices",
                per_vertex.len(),
                self.free_dof_map.len()
            )));
        }
        Ok(self.free_vertices.iter().map(|&v| per_vertex[v]).collect())
    }
}

/// Evaluates `form(u, v)` on free-DOF vectors.
pub fn eval_form(bundle: &FormBundle, sel: FormSelector, u: &[f64], v: &[f64]) -> Result<f64> {
    bundle.form(sel).bilinear(u, v)
}

/// Assembles the form bundle with the default degree-4 quadrature.
pub fn assemble_forms(mesh: &Mesh, fam: &DeformationFamily, t: f64) -> Result<FormBundle> {
    assemble_forms_with_rule(mesh, fam, t, &DEGREE4)
}

/// Assembly with an explicit quadrature rule (used by consistency tests).
pub fn assemble_forms_with_rule(
    mesh: &Mesh,
    fam: &DeformationFamily,
    t: f64,
    rule: &TriQuadrature,
) -> Result<FormBundle> {
    let fixed = mesh.dirichlet_vertices();
    let mut free_dof_map = vec![None; mesh.n_vertices()];
    let mut free_vertices = Vec::new();
    for (v, &is_fixed) in fixed.iter().enumerate() {
        if !is_fixed {
            free_dof_map[v] = Some(free_vertices.len());
            free_vertices.push(v);
        }
    }
    let n = free_vertices.len();
    if n == 0 {
        return Err(Error::EmptyFreeSet);
    }

    // One triplet stream per form; element loops push (i,j) and (j,i)
    // back-to-back with the identical value, which makes the assembled
    // matrices bitwise symmetric.
    let mut trip: [Vec<(usize, usize, f64)>; 6] = Default::default();

    for tri_idx in 0..mesh.n_triangles() {
        let corners = mesh.triangle_coords(tri_idx);
        let area = mesh.signed_area(tri_idx);
        let [p0, p1, p2] = corners;
        let twice_area = 2.0 * area;
        let grads = [
            [(p1[1] - p2[1]) / twice_area, (p2[0] - p1[0]) / twice_area],
            [(p2[1] - p0[1]) / twice_area, (p0[0] - p2[0]) / twice_area],
            [(p0[1] - p1[1]) / twice_area, (p1[0] - p0[0]) / twice_area],
        ];

        // Element matrices for the six forms, upper triangle (a <= b).
        let mut elem = [[0.0f64; 6]; 6]; // [pair][form]
        for &(zeta, w) in rule.points {
            let x = [
                zeta[0] * p0[0] + zeta[1] * p1[0] + zeta[2] * p2[0],
                zeta[0] * p0[1] + zeta[1] * p1[1] + zeta[2] * p2[1],
            ];
            let c = pullback_coeffs_in_tri(fam, x, Some(tri_idx), t)?;
            // Stiffness coefficients by the product rule in t.
            let s0 = c.q.scale(c.a);
            let s1 = c.q_dot.scale(c.a).add(&c.q.scale(c.a_dot));
            let s2 = c
                .q_ddot
                .scale(c.a)
                .add(&c.q_dot.scale(2.0 * c.a_dot))
                .add(&c.q.scale(c.a_ddot));
            let weight = w * area;
            let mut pair = 0;
            for a in 0..3 {
                for b in a..3 {
                    let mass = zeta[a] * zeta[b] * weight;
                    elem[pair][0] += weight * s0.apply(grads[a], grads[b]);
                    elem[pair][1] += mass * c.a;
                    elem[pair][2] += weight * s1.apply(grads[a], grads[b]);
                    elem[pair][3] += mass * c.a_dot;
                    elem[pair][4] += weight * s2.apply(grads[a], grads[b]);
                    elem[pair][5] += mass * c.a_ddot;
                    pair += 1;
                }
            }
        }

        let verts = mesh.triangles[tri_idx];
        let mut pair = 0;
        for a in 0..3 {
            for b in a..3 {
                if let (Some(i), Some(j)) = (free_dof_map[verts[a]], free_dof_map[verts[b]]) {
                    for (form, stream) in trip.iter_mut().enumerate() {
                        let v = elem[pair][form];
                        stream.push((i, j, v));
                        if i != j {
                            stream.push((j, i, v));
                        }
                    }
                }
                pair += 1;
            }
        }
    }

    let [ta, tb, tad, tbd, tadd, tbdd] = trip;
    let a = CsrMatrix::from_triplets(n, &ta);
    let b = CsrMatrix::from_triplets(n, &tb);
    let a_dot = CsrMatrix::from_triplets(n, &tad);
    let b_dot = CsrMatrix::from_triplets(n, &tbd);
    let a_ddot = CsrMatrix::from_triplets(n, &tadd);
    let b_ddot = CsrMatrix::from_triplets(n, &tbdd);

    let shifted = mesh.is_pure_neumann();
    let bundle = if shifted {
        FormBundle {
            a: a.scaled_add(1.0, &b)?,
            a_dot: a_dot.scaled_add(1.0, &b_dot)?,
            a_ddot: a_ddot.scaled_add(1.0, &b_ddot)?,
            b,
            b_dot,
            b_ddot,
            free_dof_map,
            free_vertices,
            shifted,
            t,
        }
    } else {
        FormBundle {
            a,
            b,
            a_dot,
            b_dot,
            a_ddot,
            b_ddot,
            free_dof_map,
            free_vertices,
            shifted,
            t,
        }
    };
    Ok(bundle)
}
