//! Run configuration: one JSON file drives a batch invocation.
//!
//! ```json
//! {
//!   "schema": 1,
//!   "command": "sweep",
//!   "mesh": { "generate": { "nx": 16, "ny": 16, "boundary": "dirichlet" } },
//!   "deformation": { "kind": "analytic", "name": "stretch_x", "scale": 1.0 },
//!   "t_grid": { "start": -0.2, "stop": 0.2, "nodes": 41 },
//!   "k_max": 4
//! }
//! ```
//!
//! Unknown fields are rejected so typos surface as parse errors rather than
//! silently ignored settings. Tolerances and output file names have
//! defaults; `t` defaults to 0.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::deform::{DeformationFamily, FieldConfig, VelocityField};
use crate::error::{Error, Result};
use crate::hadamard::Tolerances;
use crate::mesh::{all_dirichlet, all_neumann, generate_rect_mesh, load_mesh, Mesh};

/// The one schema revision this build reads.
pub const SCHEMA_VERSION: u32 = 1;

/// What a run does.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Sensitivity report at a single `t`.
    Report,
    /// Branch curves over `t_grid`, rearranged through crossings.
    Sweep,
    /// Derivatives versus finite differences, as a comparison table.
    Oracle,
}

/// Boundary condition applied to every edge of a generated mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Dirichlet,
    Neumann,
}

/// Mesh source: generate a crisscross rectangle or read a mesh file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSpec {
    Generate {
        nx: usize,
        ny: usize,
        #[serde(default = "default_side")]
        width: f64,
        #[serde(default = "default_side")]
        height: f64,
        boundary: BoundaryKind,
    },
    File { path: PathBuf },
}

fn default_side() -> f64 {
    1.0
}

/// Uniform parameter grid for sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TGrid {
    pub start: f64,
    pub stop: f64,
    pub nodes: usize,
}

impl TGrid {
    /// The strictly increasing node list, endpoints included.
    pub fn node_times(&self) -> Vec<f64> {
        let step = (self.stop - self.start) / (self.nodes - 1) as f64;
        (0..self.nodes)
            .map(|i| {
                if i + 1 == self.nodes {
                    self.stop
                } else {
                    self.start + step * i as f64
                }
            })
            .collect()
    }
}

/// All tunable tolerances of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigTolerances {
    /// Eigenvalue clustering, relative with floor 1.
    pub cluster_rel_tol: f64,
    /// Derivative equality (sub-clusters, p-values, oracle first-derivative
    /// gate), absolute.
    pub deriv_tol: f64,
    /// Eigensolver relative residual bound.
    pub solver_tol: f64,
    /// Base finite-difference step for oracle runs.
    pub fd_h0: f64,
    /// Oracle second-derivative gate, relative with floor 1.
    pub fd_second_rel_tol: f64,
}

impl Default for ConfigTolerances {
    fn default() -> Self {
        ConfigTolerances {
            cluster_rel_tol: 1e-8,
            deriv_tol: 1e-6,
            solver_tol: 1e-10,
            fd_h0: 1e-3,
            fd_second_rel_tol: 1e-4,
        }
    }
}

impl ConfigTolerances {
    /// The subset consumed by the derivative machinery.
    pub fn hadamard(&self) -> Tolerances {
        Tolerances {
            cluster_rel_tol: self.cluster_rel_tol,
            deriv_tol: self.deriv_tol,
            solver_tol: self.solver_tol,
        }
    }
}

/// Output file names, resolved against the `--out` directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputNames {
    pub report: PathBuf,
    pub curves: PathBuf,
    pub rearranged: PathBuf,
    pub events: PathBuf,
    pub oracle: PathBuf,
}

impl Default for OutputNames {
    fn default() -> Self {
        OutputNames {
            report: "report.json".into(),
            curves: "curves.csv".into(),
            rearranged: "rearranged.csv".into(),
            events: "events.json".into(),
            oracle: "oracle.csv".into(),
        }
    }
}

/// A complete, validated run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub command: Command,
    pub mesh: MeshSpec,
    pub deformation: FieldConfig,
    #[serde(default)]
    pub t: f64,
    #[serde(default)]
    pub t_grid: Option<TGrid>,
    pub k_max: usize,
    #[serde(default)]
    pub tolerances: ConfigTolerances,
    #[serde(default)]
    pub output: OutputNames,
}

impl RunConfig {
    /// Parses and validates a configuration from JSON text.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses, and validates a configuration file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Structural checks beyond what the schema enforces.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema version {} not supported (this build reads {SCHEMA_VERSION})",
                self.schema
            )));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        let tol = &self.tolerances;
        for (name, v) in [
            ("cluster_rel_tol", tol.cluster_rel_tol),
            ("deriv_tol", tol.deriv_tol),
            ("solver_tol", tol.solver_tol),
            ("fd_h0", tol.fd_h0),
            ("fd_second_rel_tol", tol.fd_second_rel_tol),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "tolerance {name} must be positive and finite, got {v}"
                )));
            }
        }
        match self.command {
            Command::Sweep => {
                let grid = self.t_grid.as_ref().ok_or_else(|| {
                    Error::Config("sweep runs need a t_grid".into())
                })?;
                if grid.nodes < 2 {
                    return Err(Error::Config(format!(
                        "t_grid needs at least 2 nodes, got {}",
                        grid.nodes
                    )));
                }
                if !(grid.start < grid.stop) || !grid.start.is_finite() || !grid.stop.is_finite() {
                    return Err(Error::Config(format!(
                        "t_grid must increase strictly (start {}, stop {})",
                        grid.start, grid.stop
                    )));
                }
            }
            Command::Report | Command::Oracle => {
                if !self.t.is_finite() {
                    return Err(Error::Config(format!("t must be finite, got {}", self.t)));
                }
            }
        }
        if let MeshSpec::Generate { nx, ny, width, height, .. } = &self.mesh {
            if *nx == 0 || *ny == 0 {
                return Err(Error::Config(format!(
                    "mesh generator needs nx, ny >= 1, got {nx} x {ny}"
                )));
            }
            if !(*width > 0.0) || !(*height > 0.0) {
                return Err(Error::Config(format!(
                    "mesh generator needs positive side lengths, got {width} x {height}"
                )));
            }
        }
        Ok(())
    }

    /// Builds the reference mesh.
    pub fn build_mesh(&self) -> Result<Mesh> {
        match &self.mesh {
            MeshSpec::Generate { nx, ny, width, height, boundary } => match boundary {
                BoundaryKind::Dirichlet => {
                    generate_rect_mesh(*nx, *ny, *width, *height, all_dirichlet)
                }
                BoundaryKind::Neumann => {
                    generate_rect_mesh(*nx, *ny, *width, *height, all_neumann)
                }
            },
            MeshSpec::File { path } => load_mesh(path),
        }
    }

    /// Builds the deformation family attached to `mesh`.
    pub fn build_family(&self, mesh: &Arc<Mesh>) -> Result<DeformationFamily> {
        let field = VelocityField::from_config(&self.deformation, mesh)?;
        DeformationFamily::affine(field)
    }
}
