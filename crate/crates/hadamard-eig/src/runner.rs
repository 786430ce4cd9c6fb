//! Batch execution of the three run commands.
//!
//! * `report` — one sensitivity report at a single parameter, as JSON.
//! * `sweep` — branch curves over a parameter grid: per-node eigenvalues and
//!   one-sided derivatives, crossing localization between nodes, transversal
//!   rearrangement, and CSV/JSON artifacts.
//! * `oracle` — a comparison table confronting every computed derivative
//!   with its finite-difference estimate.
//!
//! All artifacts are written atomically (temp file + rename) so a crashed
//! run never leaves half-written outputs, and all numeric output uses 17
//! significant digits so reruns are byte-comparable.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::assemble::assemble_forms;
use crate::config::{Command, RunConfig};
use crate::deform::DeformationFamily;
use crate::error::{Error, Result};
use crate::gevp::eigenvalues_only;
use crate::hadamard::{full_report, BranchData};
use crate::mesh::Mesh;
use crate::oracle::{fd_first_derivative, fd_second_derivative, FdConfig, Side};
use crate::rearrange::{
    apply_plan, locate_crossing, transversal_rearrange, CurveGrid, SwapEvent,
};

/// Writes `bytes` to `path` via a temporary file in the same directory and
/// an atomic rename; parent directories are created as needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = PathBuf::from(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// What a run produced: a one-line summary for stdout and the written files.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub summary: String,
    pub files: Vec<PathBuf>,
}

/// Dispatches a validated configuration to its command.
pub fn execute(config: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    match config.command {
        Command::Report => run_report(config, out_dir),
        Command::Sweep => run_sweep(config, out_dir),
        Command::Oracle => run_oracle(config, out_dir),
    }
}

fn setup(config: &RunConfig) -> Result<(Arc<Mesh>, DeformationFamily)> {
    let mesh = Arc::new(config.build_mesh()?);
    let fam = config.build_family(&mesh)?;
    Ok((mesh, fam))
}

/// Rejects parameters outside the family's validity range as configuration
/// errors naming the offending field.
fn ensure_in_range(fam: &DeformationFamily, t: f64, field: &str) -> Result<()> {
    if !fam.contains(t) {
        let (lo, hi) = fam.t_range();
        return Err(Error::Config(format!(
            "{field} = {t} lies outside the deformation validity range ({lo}, {hi})"
        )));
    }
    Ok(())
}

/// Computes the sensitivity report at `t` and writes it as JSON.
pub fn run_report(config: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    let (mesh, fam) = setup(config)?;
    ensure_in_range(&fam, config.t, "t")?;
    let report = full_report(&mesh, &fam, config.t, config.k_max, &config.tolerances.hadamard())?;
    let path = out_dir.join(&config.output.report);
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    atomic_write(&path, &bytes)?;
    Ok(RunArtifacts {
        summary: format!(
            "report: t = {}, {} eigenvalues in {} clusters -> {}",
            report.t,
            report.eigenvalues.len(),
            report.clusters.len(),
            path.display()
        ),
        files: vec![path],
    })
}

/// Swap events with their node times, serialized next to the curves.
#[derive(Serialize)]
struct EventSidecar<'a> {
    swap_events: &'a [SwapEvent],
    event_times: Vec<f64>,
    branch_map: &'a [Vec<usize>],
}

/// Sweeps the parameter grid, localizes crossings that fall between nodes,
/// rearranges the sorted branches, and writes curves + events.
pub fn run_sweep(config: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    let (mesh, fam) = setup(config)?;
    let grid_cfg = config
        .t_grid
        .ok_or_else(|| Error::Config("sweep runs need a t_grid".into()))?;
    ensure_in_range(&fam, grid_cfg.start, "t_grid.start")?;
    ensure_in_range(&fam, grid_cfg.stop, "t_grid.stop")?;
    let tols = config.tolerances.hadamard();

    let node_data = |ts: &[f64]| -> Result<Vec<BranchData>> {
        ts.par_iter()
            .map(|&t| Ok(full_report(&mesh, &fam, t, config.k_max, &tols)?.branch_data()))
            .collect()
    };

    let base_ts = grid_cfg.node_times();
    let base = node_data(&base_ts)?;
    let m = base.iter().map(|d| d.lambda.len()).min().unwrap_or(0);

    // Between-node crossing localization: a branch pair whose gap is closing
    // at the left node (right derivatives) and opening at the right node
    // (left derivatives) met — or nearly met — inside the interval. Narrow
    // the gap minimum and insert a node there; a near-miss inserts a
    // harmless extra node that clusters nothing.
    let mut inserted: Vec<f64> = Vec::new();
    for i in 0..base_ts.len() - 1 {
        for j in 0..m.saturating_sub(1) {
            let gap_left = base[i].lambda[j + 1] - base[i].lambda[j];
            let gap_right = base[i + 1].lambda[j + 1] - base[i + 1].lambda[j];
            let scale_left = tols.cluster_rel_tol * base[i].lambda[j].abs().max(1.0);
            let scale_right = tols.cluster_rel_tol * base[i + 1].lambda[j].abs().max(1.0);
            if gap_left <= scale_left || gap_right <= scale_right {
                continue; // already a cluster at a node
            }
            let closing = base[i].d_plus[j + 1] - base[i].d_plus[j] < -tols.deriv_tol;
            let opening = base[i + 1].d_minus[j + 1] - base[i + 1].d_minus[j] > tols.deriv_tol;
            if !(closing && opening) {
                continue;
            }
            let gap_fn = |t: f64| -> Result<f64> {
                ensure_in_range(&fam, t, "t")?;
                let bundle = assemble_forms(&mesh, &fam, t)?;
                let vals = eigenvalues_only(&bundle, j + 2)?;
                Ok(vals[j + 1] - vals[j])
            };
            let t_star = locate_crossing(&gap_fn, base_ts[i], base_ts[i + 1], 1e-9)?;
            if t_star - base_ts[i] > 1e-9 && base_ts[i + 1] - t_star > 1e-9 {
                inserted.push(t_star);
            }
        }
    }
    inserted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    inserted.dedup_by(|a, b| (*a - *b).abs() <= 1e-9);

    let mut nodes: Vec<(f64, BranchData)> =
        base_ts.iter().copied().zip(base).collect();
    if !inserted.is_empty() {
        let extra = node_data(&inserted)?;
        nodes.extend(inserted.iter().copied().zip(extra));
        nodes.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }
    let m = nodes.iter().map(|(_, d)| d.lambda.len()).min().unwrap_or(0);

    let take = |rows: &dyn Fn(&BranchData) -> Vec<f64>| -> Vec<Vec<f64>> {
        nodes.iter().map(|(_, d)| rows(d)[..m].to_vec()).collect()
    };
    let grid = CurveGrid {
        ts: nodes.iter().map(|(t, _)| *t).collect(),
        values: take(&|d| d.lambda.clone()),
        right_derivs: take(&|d| d.d_plus.clone()),
        left_derivs: take(&|d| d.d_minus.clone()),
        right_second: Some(take(&|d| d.d2_plus.clone())),
        left_second: Some(take(&|d| d.d2_minus.clone())),
    };

    let plan = transversal_rearrange(&grid, tols.cluster_rel_tol, tols.deriv_tol)?;
    let rearranged = apply_plan(&grid, &plan)?;

    let curves_path = out_dir.join(&config.output.curves);
    atomic_write(&curves_path, grid.to_csv().as_bytes())?;
    let rearranged_path = out_dir.join(&config.output.rearranged);
    atomic_write(&rearranged_path, rearranged.to_csv().as_bytes())?;
    let sidecar = EventSidecar {
        swap_events: &plan.swap_events,
        event_times: plan.swap_events.iter().map(|e| grid.ts[e.node]).collect(),
        branch_map: &plan.branch_map,
    };
    let mut bytes = serde_json::to_vec_pretty(&sidecar)?;
    bytes.push(b'\n');
    let events_path = out_dir.join(&config.output.events);
    atomic_write(&events_path, &bytes)?;

    Ok(RunArtifacts {
        summary: format!(
            "sweep: {} nodes ({} inserted), {} branches, {} swap events -> {}",
            grid.ts.len(),
            inserted.len(),
            m,
            plan.swap_events.len(),
            out_dir.display()
        ),
        files: vec![curves_path, rearranged_path, events_path],
    })
}

/// One line of the oracle comparison table.
struct OracleRow {
    quantity: &'static str,
    index: usize,
    side: Side,
    reference: f64,
    fd: f64,
    abs_diff: f64,
    rel_diff: f64,
    pass: bool,
}

/// Confronts computed first and second derivatives with finite differences
/// and writes the comparison table. Failing rows mark `pass = false` but do
/// not fail the run — the table is the product.
pub fn run_oracle(config: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    let (mesh, fam) = setup(config)?;
    let t = config.t;
    ensure_in_range(&fam, t, "t")?;
    let fd_cfg = FdConfig { h0: config.tolerances.fd_h0, depth: 3 };
    ensure_in_range(&fam, t - fd_cfg.h0, "t - fd_h0")?;
    ensure_in_range(&fam, t + fd_cfg.h0, "t + fd_h0")?;

    let report = full_report(&mesh, &fam, t, config.k_max, &config.tolerances.hadamard())?;
    let data = report.branch_data();
    let end = report.eigenvalues.len();

    let cache = RefCell::new(HashMap::<u64, Vec<f64>>::new());
    let curve = |tt: f64| -> Result<Vec<f64>> {
        if let Some(v) = cache.borrow().get(&tt.to_bits()) {
            return Ok(v.clone());
        }
        let bundle = assemble_forms(&mesh, &fam, tt)?;
        let vals = eigenvalues_only(&bundle, end)?;
        cache.borrow_mut().insert(tt.to_bits(), vals.clone());
        Ok(vals)
    };

    let mut rows = Vec::with_capacity(4 * end);
    for j in 1..=end {
        for side in [Side::Plus, Side::Minus] {
            let reference = match side {
                Side::Plus => data.d_plus[j - 1],
                Side::Minus => data.d_minus[j - 1],
            };
            let est = fd_first_derivative(&curve, t, j, &fd_cfg, side)?;
            let abs_diff = (est.value - reference).abs();
            rows.push(OracleRow {
                quantity: "first",
                index: j,
                side,
                reference,
                fd: est.value,
                abs_diff,
                rel_diff: abs_diff / reference.abs().max(1.0),
                pass: abs_diff <= config.tolerances.deriv_tol,
            });

            let reference2 = match side {
                Side::Plus => data.d2_plus[j - 1],
                Side::Minus => data.d2_minus[j - 1],
            };
            let est2 = fd_second_derivative(&curve, t, j, reference, &fd_cfg, side)?;
            let abs2 = (est2.value - reference2).abs();
            let rel2 = abs2 / reference2.abs().max(1.0);
            rows.push(OracleRow {
                quantity: "second",
                index: j,
                side,
                reference: reference2,
                fd: est2.value,
                abs_diff: abs2,
                rel_diff: rel2,
                pass: rel2 <= config.tolerances.fd_second_rel_tol,
            });
        }
    }

    let mut csv = String::from("quantity,index,side,reference,fd,abs_diff,rel_diff,pass\n");
    for r in &rows {
        let side = match r.side {
            Side::Plus => "plus",
            Side::Minus => "minus",
        };
        csv.push_str(&format!(
            "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
            r.quantity, r.index, side, r.reference, r.fd, r.abs_diff, r.rel_diff, r.pass
        ));
    }
    let path = out_dir.join(&config.output.oracle);
    atomic_write(&path, csv.as_bytes())?;

    let passed = rows.iter().filter(|r| r.pass).count();
    Ok(RunArtifacts {
        summary: format!(
            "oracle: {passed}/{} comparisons within tolerance -> {}",
            rows.len(),
            path.display()
        ),
        files: vec![path],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::hadamard::SensitivityReport;

    #[test]
    fn atomic_write_creates_parents_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep/nested/out.txt");
        atomic_write(&path, b"first").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"first");
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        // No temp file left behind.
        let names: Vec<_> = std::fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("out.txt")]);
    }

    fn config(command: &str, deformation: &str, extra: &str) -> RunConfig {
        RunConfig::parse(&format!(
            r#"{{
                "schema": 1,
                "command": "{command}",
                "mesh": {{ "generate": {{ "nx": 6, "ny": 6, "boundary": "dirichlet" }} }},
                "deformation": {deformation},
                "k_max": 3{extra}
            }}"#
        ))
        .unwrap()
    }

    const DILATION: &str = r#"{ "kind": "analytic", "name": "dilation", "scale": 1.0 }"#;
    const STRETCH: &str = r#"{ "kind": "analytic", "name": "stretch_x", "scale": 1.0 }"#;
    const IDENTITY: &str = r#"{ "kind": "analytic", "name": "dilation", "scale": 0.0 }"#;

    #[test]
    fn report_writes_scaling_law_json() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config("report", DILATION, "");
        let artifacts = run_report(&cfg, dir.path()).unwrap();
        assert!(artifacts.summary.starts_with("report:"));
        let report: SensitivityReport =
            serde_json::from_slice(&std::fs::read(&artifacts.files[0]).unwrap()).unwrap();
        for cl in &report.clusters {
            for &nu in &cl.nu {
                assert!((nu + 2.0 * cl.lambda).abs() <= 1e-9 * cl.lambda.abs());
            }
            for sub in &cl.subclusters {
                for &sig in &sub.sigma {
                    assert!((sig - 6.0 * cl.lambda).abs() <= 1e-9 * cl.lambda.abs());
                }
            }
        }
    }

    #[test]
    fn identity_deformation_reports_zero_derivatives() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config("report", IDENTITY, "");
        let artifacts = run_report(&cfg, dir.path()).unwrap();
        let report: SensitivityReport =
            serde_json::from_slice(&std::fs::read(&artifacts.files[0]).unwrap()).unwrap();
        for cl in &report.clusters {
            for &nu in &cl.nu {
                assert!(nu.abs() < 1e-9);
            }
            for sub in &cl.subclusters {
                assert!(sub.lambda_prime.abs() < 1e-9);
                for &sig in &sub.sigma {
                    assert!(sig.abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn out_of_range_parameter_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config("report", DILATION, r#", "t": -1.5"#);
        match run_report(&cfg, dir.path()) {
            Err(Error::Config(msg)) => assert!(msg.contains("t = -1.5"), "{msg}"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn report_output_is_byte_identical_across_runs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = config("report", STRETCH, r#", "t": 0.05"#);
        let a = run_report(&cfg, dir_a.path()).unwrap();
        let b = run_report(&cfg, dir_b.path()).unwrap();
        assert_eq!(
            std::fs::read(&a.files[0]).unwrap(),
            std::fs::read(&b.files[0]).unwrap()
        );
    }

    #[test]
    fn sweep_with_node_on_crossing_fires_one_event() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            "sweep",
            STRETCH,
            r#", "t_grid": { "start": -0.2, "stop": 0.2, "nodes": 21 }"#,
        );
        let artifacts = run_sweep(&cfg, dir.path()).unwrap();
        let sidecar: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("events.json")).unwrap())
                .unwrap();
        let events = sidecar["swap_events"].as_array().unwrap();
        assert_eq!(events.len(), 1, "summary: {}", artifacts.summary);
        assert_eq!(events[0]["k"], 2);
        assert_eq!(events[0]["n"], 2);
        assert_eq!(events[0]["p"], 1);
        assert_eq!(sidecar["event_times"][0], 0.0);
        let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 22); // header + 21 nodes
    }

    #[test]
    fn sweep_without_crossings_has_no_events() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            "sweep",
            DILATION,
            r#", "t_grid": { "start": -0.1, "stop": 0.1, "nodes": 5 }"#,
        );
        let artifacts = run_sweep(&cfg, dir.path()).unwrap();
        assert!(artifacts.summary.contains("0 swap events"), "{}", artifacts.summary);
        let sidecar: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("events.json")).unwrap())
                .unwrap();
        assert!(sidecar["swap_events"].as_array().unwrap().is_empty());
    }

    #[test]
    fn coarse_sweep_inserts_a_node_at_the_crossing() {
        // Two nodes straddling the stretch crossing at t = 0: the gap
        // minimum is located and a node inserted, which then carries the
        // event.
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            "sweep",
            STRETCH,
            r#", "t_grid": { "start": -0.11, "stop": 0.09, "nodes": 2 }"#,
        );
        let artifacts = run_sweep(&cfg, dir.path()).unwrap();
        assert!(artifacts.summary.contains("(1 inserted)"), "{}", artifacts.summary);
        let sidecar: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("events.json")).unwrap())
                .unwrap();
        let events = sidecar["swap_events"].as_array().unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0]["node"], 1); // the inserted middle node
        let t_event = sidecar["event_times"][0].as_f64().unwrap();
        assert!(t_event.abs() < 1e-6, "crossing located at {t_event}");
    }

    #[test]
    fn oracle_table_passes_for_the_scaling_family() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config("oracle", DILATION, "");
        let artifacts = run_oracle(&cfg, dir.path()).unwrap();
        let csv = std::fs::read_to_string(&artifacts.files[0]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "quantity,index,side,reference,fd,abs_diff,rel_diff,pass"
        );
        let rows: Vec<&str> = lines.collect();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.ends_with(",true")), "failing rows in:\n{csv}");
    }

    #[test]
    fn oracle_with_huge_step_flags_failures_but_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config("oracle", DILATION, r#", "tolerances": { "fd_h0": 0.5 }"#);
        let artifacts = run_oracle(&cfg, dir.path()).unwrap();
        let csv = std::fs::read_to_string(&artifacts.files[0]).unwrap();
        assert!(
            csv.lines().skip(1).any(|r| r.ends_with(",false")),
            "expected truncation failures in:\n{csv}"
        );
    }
}
