//! Planar triangle meshes with tagged boundary edges.
//!
//! A [`Mesh`] stores vertices, counter-clockwise triangles, and the boundary
//! edges, each tagged Dirichlet or Neumann. Meshes come from the structured
//! rectangle generator ([`generate_rect_mesh`]) or from a small line-oriented
//! text format ([`load_mesh`] / [`save_mesh`]):
//!
//! ```text
//! # comment
//! v <x> <y>          vertex coordinates
//! t <i> <j> <k>      triangle (counter-clockwise vertex indices)
//! e <i> <j> <D|N>    tagged boundary edge
//! ```
//!
//! Coordinates are written with 17 significant digits so that a save/load
//! round trip reproduces every `f64` bit-exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boundary condition tag carried by each boundary edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryTag {
    /// Homogeneous Dirichlet: the eigenfunction vanishes on this edge.
    Dirichlet,
    /// Homogeneous Neumann: natural condition, no constraint on the space.
    Neumann,
}

impl BoundaryTag {
    fn letter(self) -> char {
        match self {
            BoundaryTag::Dirichlet => 'D',
            BoundaryTag::Neumann => 'N',
        }
    }
}

/// Triangle mesh of a polygonal reference domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    /// Vertex coordinates.
    pub vertices: Vec<[f64; 2]>,
    /// Triangles as vertex index triples, counter-clockwise.
    pub triangles: Vec<[usize; 3]>,
    /// Tagged boundary edges `(a, b, tag)`; orientation is not significant.
    pub boundary_edges: Vec<(usize, usize, BoundaryTag)>,
}

impl Mesh {
    /// Number of vertices.
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Number of triangles.
    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Corner coordinates of triangle `t`.
    pub fn triangle_coords(&self, t: usize) -> [[f64; 2]; 3] {
        let [i, j, k] = self.triangles[t];
        [self.vertices[i], self.vertices[j], self.vertices[k]]
    }

    /// Signed area of triangle `t` (positive for counter-clockwise order).
    pub fn signed_area(&self, t: usize) -> f64 {
        let [p0, p1, p2] = self.triangle_coords(t);
        0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
    }

    /// Vertices that lie on at least one Dirichlet edge.
    pub fn dirichlet_vertices(&self) -> Vec<bool> {
        let mut fixed = vec![false; self.n_vertices()];
        for &(a, b, tag) in &self.boundary_edges {
            if tag == BoundaryTag::Dirichlet {
                if a < fixed.len() {
                    fixed[a] = true;
                }
                if b < fixed.len() {
                    fixed[b] = true;
                }
            }
        }
        fixed
    }

    /// True when no boundary edge carries a Dirichlet tag.
    pub fn is_pure_neumann(&self) -> bool {
        self.boundary_edges
            .iter()
            .all(|&(_, _, tag)| tag == BoundaryTag::Neumann)
    }
}

/// One defect found by [`validate_mesh`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    /// A triangle references a vertex index outside the vertex list.
    VertexIndexOutOfRange { triangle: usize, vertex: usize },
    /// A boundary edge references a vertex index outside the vertex list.
    EdgeIndexOutOfRange { edge: usize, vertex: usize },
    /// Triangle with non-positive signed area (degenerate or clockwise).
    NonPositiveArea { triangle: usize, area: f64 },
    /// An edge shared by three or more triangles.
    NonManifoldEdge { a: usize, b: usize, count: usize },
    /// A topological boundary edge that carries no tag.
    UntaggedBoundaryEdge { a: usize, b: usize },
    /// A tagged edge that does not border exactly one triangle.
    TaggedNonBoundary { a: usize, b: usize, count: usize },
    /// The same edge appears more than once in the tagged list.
    DuplicateTag { a: usize, b: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::VertexIndexOutOfRange { triangle, vertex } => {
                write!(f, "triangle {triangle} references missing vertex {vertex}")
            }
            Violation::EdgeIndexOutOfRange { edge, vertex } => {
                write!(f, "boundary edge {edge} references missing vertex {vertex}")
            }
            Violation::NonPositiveArea { triangle, area } => {
                write!(f, "triangle {triangle} has non-positive area {area:.3e}")
            }
            Violation::NonManifoldEdge { a, b, count } => {
                write!(f, "edge ({a}, {b}) is shared by {count} triangles")
            }
            Violation::UntaggedBoundaryEdge { a, b } => {
                write!(f, "boundary edge ({a}, {b}) carries no tag")
            }
            Violation::TaggedNonBoundary { a, b, count } => {
                write!(f, "tagged edge ({a}, {b}) borders {count} triangles (expected exactly 1)")
            }
            Violation::DuplicateTag { a, b } => {
                write!(f, "edge ({a}, {b}) is tagged more than once")
            }
        }
    }
}

fn norm_edge(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Checks mesh invariants and returns every violation found (empty = valid).
///
/// Checked invariants:
/// * all vertex indices are in range,
/// * every triangle has positive signed area (counter-clockwise),
/// * every edge borders at most two triangles,
/// * the tagged edge list covers the topological boundary exactly once, and
///   tags only edges that border exactly one triangle.
pub fn validate_mesh(mesh: &Mesh) -> Vec<Violation> {
    let mut out = Vec::new();
    let nv = mesh.n_vertices();

    for (t, tri) in mesh.triangles.iter().enumerate() {
        for &v in tri {
            if v >= nv {
                out.push(Violation::VertexIndexOutOfRange { triangle: t, vertex: v });
            }
        }
    }
    for (e, &(a, b, _)) in mesh.boundary_edges.iter().enumerate() {
        for v in [a, b] {
            if v >= nv {
                out.push(Violation::EdgeIndexOutOfRange { edge: e, vertex: v });
            }
        }
    }
    if !out.is_empty() {
        // Geometry and adjacency are meaningless with broken indices.
        return out;
    }

    for t in 0..mesh.n_triangles() {
        let area = mesh.signed_area(t);
        if area <= 0.0 {
            out.push(Violation::NonPositiveArea { triangle: t, area });
        }
    }

    // Undirected edge -> number of adjacent triangles, in deterministic order.
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for tri in &mesh.triangles {
        for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            *counts.entry(norm_edge(a, b)).or_insert(0) += 1;
        }
    }
    for (&(a, b), &count) in &counts {
        if count > 2 {
            out.push(Violation::NonManifoldEdge { a, b, count });
        }
    }

    let mut tagged: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &(a, b, _) in &mesh.boundary_edges {
        let key = norm_edge(a, b);
        *tagged.entry(key).or_insert(0) += 1;
    }
    for (&(a, b), &times) in &tagged {
        if times > 1 {
            out.push(Violation::DuplicateTag { a, b });
        }
        let count = counts.get(&(a, b)).copied().unwrap_or(0);
        if count != 1 {
            out.push(Violation::TaggedNonBoundary { a, b, count });
        }
    }
    for (&(a, b), &count) in &counts {
        if count == 1 && !tagged.contains_key(&(a, b)) {
            out.push(Violation::UntaggedBoundaryEdge { a, b });
        }
    }

    out
}

/// Structured crisscross mesh of the rectangle `[0, width] x [0, height]`.
///
/// Each of the `nx * ny` cells is split into four triangles around its
/// center, so the mesh has `(nx+1)(ny+1) + nx*ny` vertices and `4*nx*ny`
/// triangles. Grid vertices come first (row-major, bottom to top), cell
/// centers after. The `tagger` assigns a boundary tag to each boundary edge
/// from its two endpoint coordinates.
pub fn generate_rect_mesh<F>(
    nx: usize,
    ny: usize,
    width: f64,
    height: f64,
    tagger: F,
) -> Result<Mesh>
where
    F: Fn([f64; 2], [f64; 2]) -> BoundaryTag,
{
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidParam(format!(
            "rectangle mesh needs at least one cell per direction (got {nx} x {ny})"
        )));
    }
    if !(width > 0.0) || !(height > 0.0) {
        return Err(Error::InvalidParam(format!(
            "rectangle mesh needs positive dimensions (got {width} x {height})"
        )));
    }

    let grid = |i: usize, j: usize| j * (nx + 1) + i;
    let center_base = (nx + 1) * (ny + 1);
    let center = |i: usize, j: usize| center_base + j * nx + i;

    let mut vertices = Vec::with_capacity(center_base + nx * ny);
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([width * i as f64 / nx as f64, height * j as f64 / ny as f64]);
        }
    }
    for j in 0..ny {
        for i in 0..nx {
            vertices.push([
                width * (2 * i + 1) as f64 / (2 * nx) as f64,
                height * (2 * j + 1) as f64 / (2 * ny) as f64,
            ]);
        }
    }

    let mut triangles = Vec::with_capacity(4 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (bl, br) = (grid(i, j), grid(i + 1, j));
            let (tl, tr) = (grid(i, j + 1), grid(i + 1, j + 1));
            let c = center(i, j);
            triangles.push([bl, br, c]);
            triangles.push([br, tr, c]);
            triangles.push([tr, tl, c]);
            triangles.push([tl, bl, c]);
        }
    }

    let mut boundary_edges = Vec::with_capacity(2 * (nx + ny));
    let mut push_edge = |a: usize, b: usize, vertices: &[[f64; 2]]| {
        let tag = tagger(vertices[a], vertices[b]);
        boundary_edges.push((a, b, tag));
    };
    for i in 0..nx {
        push_edge(grid(i, 0), grid(i + 1, 0), &vertices); // bottom
    }
    for i in 0..nx {
        push_edge(grid(i, ny), grid(i + 1, ny), &vertices); // top
    }
    for j in 0..ny {
        push_edge(grid(0, j), grid(0, j + 1), &vertices); // left
    }
    for j in 0..ny {
        push_edge(grid(nx, j), grid(nx, j + 1), &vertices); // right
    }

    let mesh = Mesh { vertices, triangles, boundary_edges };
    debug_assert!(validate_mesh(&mesh).is_empty());
    Ok(mesh)
}

/// Tagger marking every boundary edge Dirichlet.
pub fn all_dirichlet(_: [f64; 2], _: [f64; 2]) -> BoundaryTag {
    BoundaryTag::Dirichlet
}

/// Tagger marking every boundary edge Neumann.
pub fn all_neumann(_: [f64; 2], _: [f64; 2]) -> BoundaryTag {
    BoundaryTag::Neumann
}

/// Parses the mesh text format without validating the result.
pub fn parse_mesh(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut boundary_edges = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::MeshParse { line: line_no, msg };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "v" => {
                if tokens.len() != 3 {
                    return Err(parse_err(format!(
                        "vertex line needs 2 coordinates, got {}",
                        tokens.len() - 1
                    )));
                }
                let mut xy = [0.0; 2];
                for (slot, tok) in xy.iter_mut().zip(&tokens[1..]) {
                    let val: f64 = tok
                        .parse()
                        .map_err(|e| parse_err(format!("bad coordinate {tok:?}: {e}")))?;
                    if !val.is_finite() {
                        return Err(parse_err(format!("non-finite coordinate {tok:?}")));
                    }
                    *slot = val;
                }
                vertices.push(xy);
            }
            "t" => {
                if tokens.len() != 4 {
                    return Err(parse_err(format!(
                        "triangle line needs 3 indices, got {}",
                        tokens.len() - 1
                    )));
                }
                let mut tri = [0usize; 3];
                for (slot, tok) in tri.iter_mut().zip(&tokens[1..]) {
                    *slot = tok
                        .parse()
                        .map_err(|e| parse_err(format!("bad vertex index {tok:?}: {e}")))?;
                }
                triangles.push(tri);
            }
            "e" => {
                if tokens.len() != 4 {
                    return Err(parse_err(format!(
                        "edge line needs 2 indices and a tag, got {} fields",
                        tokens.len() - 1
                    )));
                }
                let a: usize = tokens[1]
                    .parse()
                    .map_err(|e| parse_err(format!("bad vertex index {:?}: {e}", tokens[1])))?;
                let b: usize = tokens[2]
                    .parse()
                    .map_err(|e| parse_err(format!("bad vertex index {:?}: {e}", tokens[2])))?;
                let tag = match tokens[3] {
                    "D" => BoundaryTag::Dirichlet,
                    "N" => BoundaryTag::Neumann,
                    other => {
                        return Err(parse_err(format!("bad boundary tag {other:?} (want D or N)")))
                    }
                };
                boundary_edges.push((a, b, tag));
            }
            other => {
                return Err(parse_err(format!("unknown directive {other:?} (want v, t, or e)")));
            }
        }
    }

    Ok(Mesh { vertices, triangles, boundary_edges })
}

/// Loads and validates a mesh from the text format.
pub fn load_mesh<P: AsRef<Path>>(path: P) -> Result<Mesh> {
    let text = std::fs::read_to_string(path)?;
    let mesh = parse_mesh(&text)?;
    let violations = validate_mesh(&mesh);
    if !violations.is_empty() {
        return Err(Error::mesh_invalid(violations));
    }
    Ok(mesh)
}

/// Serializes a mesh to the text format (17 significant digits).
pub fn format_mesh(mesh: &Mesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {:.16e} {:.16e}\n", v[0], v[1]));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("t {} {} {}\n", t[0], t[1], t[2]));
    }
    for &(a, b, tag) in &mesh.boundary_edges {
        out.push_str(&format!("e {} {} {}\n", a, b, tag.letter()));
    }
    out
}

/// Writes a mesh to `path` in the text format (atomically: temp file + rename).
pub fn save_mesh<P: AsRef<Path>>(path: P, mesh: &Mesh) -> Result<()> {
    crate::runner::atomic_write(path.as_ref(), format_mesh(mesh).as_bytes())
}
