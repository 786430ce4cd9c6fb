//! Transversal rearrangement of sampled eigenvalue branches.
//!
//! Sorted eigenvalue curves `λ_1(t) ≤ … ≤ λ_m(t)` kink where branches cross.
//! At a crossing node with cluster entry `k`, size `n`, and right derivatives
//! `ḟ⁺_k ≤ … ≤ ḟ⁺_{k+n-1}`, the **p-value**
//!
//! ```text
//! p = max{ j : k ≤ j ≤ k+⌊n/2⌋−1,  ḟ⁺_j < ḟ⁺_{2k+n−1−j} } − k + 1
//! ```
//!
//! (0 when no index qualifies) counts how many branch pairs actually cross
//! transversally. Relabeling `j ↔ 2k+n−1−j` for the `p` outer pairs connects
//! each branch to its true analytic continuation: the rearranged labels have
//! matching one-sided derivatives at the crossing, because the left
//! derivative of sorted branch `j` equals the right derivative of sorted
//! branch `2k+n−1−j`.
//!
//! The rearrangement is represented as a [`RearrangementPlan`]: the list of
//! swap events plus, per grid interval, the label → sorted-index assignment
//! obtained by composing the event transpositions left to right. Applying
//! the plan permutes right-sided data with the interval starting at a node
//! and left-sided data with the interval ending there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hadamard::detect_clusters;

/// Eigenvalue branches sampled on a t-grid, with one-sided derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveGrid {
    /// Strictly increasing sample times.
    pub ts: Vec<f64>,
    /// Per-node ascending eigenvalues, `values[node][branch]`.
    pub values: Vec<Vec<f64>>,
    /// Per-node right derivatives `λ̇⁺`.
    pub right_derivs: Vec<Vec<f64>>,
    /// Per-node left derivatives `λ̇⁻`.
    pub left_derivs: Vec<Vec<f64>>,
    /// Optional right second derivatives.
    pub right_second: Option<Vec<Vec<f64>>>,
    /// Optional left second derivatives.
    pub left_second: Option<Vec<Vec<f64>>>,
}

impl CurveGrid {
    /// Number of branches per node.
    pub fn n_branches(&self) -> usize {
        self.values.first().map(|v| v.len()).unwrap_or(0)
    }

    /// Checks grid shape, strictly increasing times, and per-node ascending
    /// values.
    pub fn validate(&self) -> Result<()> {
        let n_nodes = self.ts.len();
        if n_nodes == 0 {
            return Err(Error::InvalidParam("curve grid has no nodes".into()));
        }
        for w in self.ts.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidParam(format!(
                    "grid times must increase strictly ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        let m = self.n_branches();
        if m == 0 {
            return Err(Error::InvalidParam("curve grid has no branches".into()));
        }
        let check_field = |name: &str, field: &Vec<Vec<f64>>| -> Result<()> {
            if field.len() != n_nodes || field.iter().any(|row| row.len() != m) {
                return Err(Error::DimensionMismatch(format!(
                    "curve grid field {name} is not {n_nodes} x {m}"
                )));
            }
            Ok(())
        };
        check_field("values", &self.values)?;
        check_field("right_derivs", &self.right_derivs)?;
        check_field("left_derivs", &self.left_derivs)?;
        if let Some(s) = &self.right_second {
            check_field("right_second", s)?;
        }
        if let Some(s) = &self.left_second {
            check_field("left_second", s)?;
        }
        for (i, row) in self.values.iter().enumerate() {
            for w in row.windows(2) {
                if !(w[0] <= w[1]) {
                    return Err(Error::InvalidParam(format!(
                        "values at node {i} are not ascending ({} then {})",
                        w[0], w[1]
                    )));
                }
            }
        }
        Ok(())
    }

    /// CSV rendering: `t, branch_*, dplus_*, dminus_*` plus second
    /// derivative columns when present; 17 significant digits.
    pub fn to_csv(&self) -> String {
        let m = self.n_branches();
        let mut out = String::from("t");
        let mut head = |prefix: &str| {
            for j in 1..=m {
                out.push(',');
                out.push_str(prefix);
                out.push_str(&j.to_string());
            }
        };
        head("branch_");
        head("dplus_");
        head("dminus_");
        if self.right_second.is_some() {
            head("d2plus_");
        }
        if self.left_second.is_some() {
            head("d2minus_");
        }
        out.push('\n');
        for i in 0..self.ts.len() {
            out.push_str(&format!("{:.16e}", self.ts[i]));
            let mut row = |vals: &[f64]| {
                for v in vals {
                    out.push_str(&format!(",{v:.16e}"));
                }
            };
            row(&self.values[i]);
            row(&self.right_derivs[i]);
            row(&self.left_derivs[i]);
            if let Some(s) = &self.right_second {
                row(&s[i]);
            }
            if let Some(s) = &self.left_second {
                row(&s[i]);
            }
            out.push('\n');
        }
        out
    }
}

/// One crossing: at grid node `node`, the cluster starting at 1-based index
/// `k` with `n` members swaps its `p` outer label pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapEvent {
    pub node: usize,
    pub k: usize,
    pub n: usize,
    pub p: usize,
}

/// Swap events plus the per-interval branch labeling they generate.
///
/// `branch_map[i][label]` is the 0-based sorted index that branch `label`
/// follows on the interval starting at node `i`; the labeling changes only
/// at event nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RearrangementPlan {
    pub swap_events: Vec<SwapEvent>,
    pub branch_map: Vec<Vec<usize>>,
}

/// Number of transversally crossing branch pairs in a cluster, from the
/// right derivatives at the node.
///
/// Strictness is tested with an absolute margin: index `j` qualifies when
/// `ḟ⁺_{2k+n−1−j} − ḟ⁺_j > deriv_tol`. Indices are 1-based. Panics if the
/// cluster indices fall outside the lists (caller contract).
pub fn cluster_p_value(
    values: &[f64],
    right_derivs: &[f64],
    k: usize,
    n: usize,
    deriv_tol: f64,
) -> usize {
    assert!(
        k >= 1 && n >= 1 && k + n - 1 <= values.len(),
        "cluster [{k}, {}) outside the {} sampled branches",
        k + n,
        values.len()
    );
    assert_eq!(
        values.len(),
        right_derivs.len(),
        "values and right derivatives disagree in length"
    );
    let mut p = 0;
    for q in 0..n / 2 {
        let j = k + q;
        let jm = 2 * k + n - 1 - j;
        if right_derivs[jm - 1] - right_derivs[j - 1] > deriv_tol {
            p = q + 1;
        }
    }
    p
}

/// The transposition set of one event, applied to a label → sorted-index
/// assignment: each label following sorted index `k−1+q` (0-based) hands
/// over to `k−1+n−1−q` and vice versa, for `q < p`.
fn apply_event(assignment: &mut [usize], ev: &SwapEvent) {
    for q in 0..ev.p {
        let a = ev.k - 1 + q;
        let b = ev.k - 1 + ev.n - 1 - q;
        for slot in assignment.iter_mut() {
            if *slot == a {
                *slot = b;
            } else if *slot == b {
                *slot = a;
            }
        }
    }
}

/// Detects swap events on a sampled grid and composes the per-interval
/// branch labeling.
///
/// A node carries an event for each eigenvalue cluster (grouped by
/// `cluster_tol`, relative with floor 1) whose p-value is at least 1. Two
/// events at adjacent nodes with overlapping index ranges mean the grid
/// cannot separate consecutive crossings and yield
/// [`Error::GridTooCoarse`].
pub fn transversal_rearrange(
    grid: &CurveGrid,
    cluster_tol: f64,
    deriv_tol: f64,
) -> Result<RearrangementPlan> {
    grid.validate()?;
    let n_nodes = grid.ts.len();
    let m = grid.n_branches();

    let mut events: Vec<SwapEvent> = Vec::new();
    for i in 0..n_nodes {
        for cl in detect_clusters(&grid.values[i], cluster_tol) {
            if cl.m < 2 {
                continue;
            }
            let p = cluster_p_value(&grid.values[i], &grid.right_derivs[i], cl.k, cl.m, deriv_tol);
            if p >= 1 {
                events.push(SwapEvent { node: i, k: cl.k, n: cl.m, p });
            }
        }
    }

    for a in &events {
        for b in &events {
            if b.node == a.node + 1 && a.k < b.k + b.n && b.k < a.k + a.n {
                return Err(Error::GridTooCoarse { node_a: a.node, node_b: b.node });
            }
        }
    }

    let mut assignment: Vec<usize> = (0..m).collect();
    let mut branch_map = Vec::with_capacity(n_nodes);
    let mut ev_idx = 0usize;
    for i in 0..n_nodes {
        while ev_idx < events.len() && events[ev_idx].node == i {
            apply_event(&mut assignment, &events[ev_idx]);
            ev_idx += 1;
        }
        branch_map.push(assignment.clone());
    }
    Ok(RearrangementPlan { swap_events: events, branch_map })
}

/// Materializes a plan: permutes per-node data into labeled branches.
///
/// Right-sided fields at node `i` follow `branch_map[i]`; left-sided fields
/// follow `branch_map[i−1]` (the labeling of the interval ending at the
/// node), so a branch keeps its own one-sided derivatives through an event.
pub fn apply_plan(grid: &CurveGrid, plan: &RearrangementPlan) -> Result<CurveGrid> {
    let n_nodes = grid.ts.len();
    let m = grid.n_branches();
    if plan.branch_map.len() != n_nodes {
        return Err(Error::DimensionMismatch(format!(
            "plan covers {} nodes, grid has {n_nodes}",
            plan.branch_map.len()
        )));
    }
    for (i, map) in plan.branch_map.iter().enumerate() {
        let mut seen = vec![false; m];
        if map.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "plan row {i} has {} labels, grid has {m} branches",
                map.len()
            )));
        }
        for &s in map {
            if s >= m || seen[s] {
                return Err(Error::InvalidParam(format!(
                    "plan row {i} is not a permutation of 0..{m}"
                )));
            }
            seen[s] = true;
        }
    }

    let permute = |rows: &[Vec<f64>], side_right: bool| -> Vec<Vec<f64>> {
        (0..n_nodes)
            .map(|i| {
                let map = if side_right || i == 0 {
                    &plan.branch_map[i]
                } else {
                    &plan.branch_map[i - 1]
                };
                map.iter().map(|&s| rows[i][s]).collect()
            })
            .collect()
    };

    Ok(CurveGrid {
        ts: grid.ts.clone(),
        values: permute(&grid.values, true),
        right_derivs: permute(&grid.right_derivs, true),
        left_derivs: permute(&grid.left_derivs, false),
        right_second: grid.right_second.as_ref().map(|s| permute(s, true)),
        left_second: grid.left_second.as_ref().map(|s| permute(s, false)),
    })
}

/// Narrows an isolated crossing inside `[t_lo, t_hi]` by golden-section
/// minimization of the nonnegative gap function (e.g. `λ_{j+1} − λ_j` of
/// sorted curves, which is V-shaped around a transversal crossing).
pub fn locate_crossing<F>(gap: &F, t_lo: f64, t_hi: f64, tol_t: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if !(t_lo < t_hi) || !(tol_t > 0.0) {
        return Err(Error::InvalidParam(format!(
            "crossing search needs t_lo < t_hi and tol_t > 0 (got [{t_lo}, {t_hi}], {tol_t})"
        )));
    }
    const INVPHI: f64 = 0.618_033_988_749_894_8;
    let (mut lo, mut hi) = (t_lo, t_hi);
    let mut x1 = hi - INVPHI * (hi - lo);
    let mut x2 = lo + INVPHI * (hi - lo);
    let mut f1 = gap(x1)?;
    let mut f2 = gap(x2)?;
    for _ in 0..200 {
        if hi - lo <= tol_t {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INVPHI * (hi - lo);
            f1 = gap(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INVPHI * (hi - lo);
            f2 = gap(x2)?;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn p_value_matches_definition_arithmetic() {
        let pi2 = std::f64::consts::PI.powi(2);
        assert_eq!(cluster_p_value(&[5.0 * pi2; 2], &[-8.0 * pi2, -2.0 * pi2], 1, 2, 1e-6), 1);
        assert_eq!(cluster_p_value(&[3.0; 2], &[5.0, 5.0], 1, 2, 1e-6), 0);
        // ⌊3/2⌋ = 1, so only j = k is examined.
        assert_eq!(cluster_p_value(&[2.0; 3], &[1.0, 2.0, 3.0], 1, 3, 1e-6), 1);
        // Embedded cluster: indices shift with k.
        assert_eq!(cluster_p_value(&[0.0, 2.0, 2.0, 9.0], &[0.0, -1.0, 1.0, 0.0], 2, 2, 1e-6), 1);
    }

    /// Sorted branches of {t, −t}: values (−|t|, |t|), with the sorted-curve
    /// one-sided derivatives at the crossing.
    fn crossing_grid(n_nodes: usize) -> CurveGrid {
        let ts: Vec<f64> = (0..n_nodes)
            .map(|i| -1.0 + 2.0 * i as f64 / (n_nodes - 1) as f64)
            .collect();
        let mut values = Vec::new();
        let mut right = Vec::new();
        let mut left = Vec::new();
        for &t in &ts {
            values.push(vec![-t.abs(), t.abs()]);
            if t < 0.0 {
                right.push(vec![1.0, -1.0]);
                left.push(vec![1.0, -1.0]);
            } else if t > 0.0 {
                right.push(vec![-1.0, 1.0]);
                left.push(vec![-1.0, 1.0]);
            } else {
                right.push(vec![-1.0, 1.0]);
                left.push(vec![1.0, -1.0]);
            }
        }
        CurveGrid {
            ts,
            values,
            right_derivs: right,
            left_derivs: left,
            right_second: None,
            left_second: None,
        }
    }

    #[test]
    fn single_crossing_yields_one_event_and_exact_lines() {
        let grid = crossing_grid(21); // node 10 sits at t = 0
        let plan = transversal_rearrange(&grid, 1e-8, 1e-6).unwrap();
        assert_eq!(plan.swap_events, vec![SwapEvent { node: 10, k: 1, n: 2, p: 1 }]);
        // Labels change at the event node only.
        for i in 1..grid.ts.len() {
            if i < 10 {
                assert_eq!(plan.branch_map[i], vec![0, 1]);
            } else {
                assert_eq!(plan.branch_map[i], vec![1, 0]);
            }
        }
        let rearranged = apply_plan(&grid, &plan).unwrap();
        for (i, &t) in rearranged.ts.iter().enumerate() {
            // Branch 1 is the analytic line t, branch 2 the line −t.
            assert_eq!(rearranged.values[i][0], t);
            assert_eq!(rearranged.values[i][1], -t);
        }
        // Derivative continuity at the event: jump exactly zero after
        // relabeling, versus 2 for the sorted branches.
        let ev = 10;
        for b in 0..2 {
            let jump = (rearranged.left_derivs[ev][b] - rearranged.right_derivs[ev][b]).abs();
            assert_eq!(jump, 0.0);
            let sorted_jump = (grid.left_derivs[ev][b] - grid.right_derivs[ev][b]).abs();
            assert!(sorted_jump > 1e-6);
        }
    }

    #[test]
    fn equal_derivative_touch_produces_no_event() {
        // Two branches equal at every node with equal derivatives: clusters
        // everywhere, but p = 0 so nothing fires.
        let ts: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        let n = ts.len();
        let grid = CurveGrid {
            ts,
            values: vec![vec![1.0, 1.0]; n],
            right_derivs: vec![vec![0.5, 0.5]; n],
            left_derivs: vec![vec![0.5, 0.5]; n],
            right_second: None,
            left_second: None,
        };
        let plan = transversal_rearrange(&grid, 1e-8, 1e-6).unwrap();
        assert!(plan.swap_events.is_empty());
        assert!(plan.branch_map.iter().all(|m| m == &vec![0, 1]));
        let rearranged = apply_plan(&grid, &plan).unwrap();
        assert_eq!(rearranged, grid);
    }

    #[test]
    fn four_way_crossing_swaps_two_pairs() {
        // Lines with slopes −2, −1, 1, 2 through the origin.
        let slopes = [-2.0, -1.0, 1.0, 2.0];
        let ts: Vec<f64> = (0..11).map(|i| -0.5 + i as f64 * 0.1).collect();
        let mut values = Vec::new();
        let mut right = Vec::new();
        let mut left = Vec::new();
        for &t in &ts {
            let mut pairs: Vec<(f64, f64)> = slopes.iter().map(|&s| (s * t, s)).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            values.push(pairs.iter().map(|p| p.0).collect());
            if t.abs() < 1e-12 {
                right.push(slopes.to_vec());
                left.push(slopes.iter().rev().copied().collect());
            } else {
                let d: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                right.push(d.clone());
                left.push(d);
            }
        }
        let grid = CurveGrid {
            ts,
            values,
            right_derivs: right,
            left_derivs: left,
            right_second: None,
            left_second: None,
        };
        let plan = transversal_rearrange(&grid, 1e-8, 1e-6).unwrap();
        assert_eq!(plan.swap_events, vec![SwapEvent { node: 5, k: 1, n: 4, p: 2 }]);
        assert_eq!(plan.branch_map[5], vec![3, 2, 1, 0]);
        let rearranged = apply_plan(&grid, &plan).unwrap();
        // Left of the crossing the steepest decreasing line is lowest, so
        // label b starts on slope 2, 1, −1, −2 and must stay there.
        let label_slopes = [2.0, 1.0, -1.0, -2.0];
        for (i, &t) in rearranged.ts.iter().enumerate() {
            for (b, &s) in label_slopes.iter().enumerate() {
                assert!(
                    (rearranged.values[i][b] - s * t).abs() < 1e-12,
                    "node {i} label {b}"
                );
            }
        }
        for b in 0..4 {
            let jump = (rearranged.left_derivs[5][b] - rearranged.right_derivs[5][b]).abs();
            assert_eq!(jump, 0.0);
        }
    }

    #[test]
    fn partial_swap_leaves_the_middle_pair_alone() {
        // Event (k=2, n=3, p=1) on five branches: labels 2 and 4 transpose,
        // label 3 passes through.
        let mut assignment: Vec<usize> = (0..5).collect();
        apply_event(&mut assignment, &SwapEvent { node: 0, k: 2, n: 3, p: 1 });
        assert_eq!(assignment, vec![0, 3, 2, 1, 4]);
    }

    #[test]
    fn double_application_restores_the_original_grid() {
        let grid = crossing_grid(21);
        let plan = transversal_rearrange(&grid, 1e-8, 1e-6).unwrap();
        let once = apply_plan(&grid, &plan).unwrap();
        let twice = apply_plan(&once, &plan).unwrap();
        assert_eq!(twice.values, grid.values);
        assert_eq!(twice.right_derivs, grid.right_derivs);
        // Left-sided data lags by one interval, so only values and right
        // derivatives are restored exactly; check them bitwise.
    }

    #[test]
    fn adjacent_overlapping_events_are_rejected() {
        let grid = CurveGrid {
            ts: vec![0.0, 1.0, 2.0, 3.0],
            values: vec![
                vec![1.0, 1.0],
                vec![2.0, 2.0],
                vec![3.0, 4.0],
                vec![3.0, 5.0],
            ],
            right_derivs: vec![vec![-1.0, 1.0]; 4],
            left_derivs: vec![vec![-1.0, 1.0]; 4],
            right_second: None,
            left_second: None,
        };
        match transversal_rearrange(&grid, 1e-8, 1e-6) {
            Err(Error::GridTooCoarse { node_a: 0, node_b: 1 }) => {}
            other => panic!("expected GridTooCoarse, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let grid = crossing_grid(5);
        let short = RearrangementPlan {
            swap_events: vec![],
            branch_map: vec![vec![0, 1]; 3],
        };
        assert!(matches!(apply_plan(&grid, &short), Err(Error::DimensionMismatch(_))));
        let not_perm = RearrangementPlan {
            swap_events: vec![],
            branch_map: vec![vec![0, 0]; 5],
        };
        assert!(matches!(apply_plan(&grid, &not_perm), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn locate_crossing_narrows_a_v_shaped_gap() {
        let gap = |t: f64| Ok((t - 0.3).abs());
        let t_star = locate_crossing(&gap, 0.0, 1.0, 1e-9).unwrap();
        assert!((t_star - 0.3).abs() < 1e-7, "got {t_star}");
        let smooth = |t: f64| Ok((t + 0.125) * (t + 0.125));
        let t_min = locate_crossing(&smooth, -1.0, 1.0, 1e-9).unwrap();
        assert!((t_min + 0.125).abs() < 1e-7, "got {t_min}");
    }

    #[test]
    fn csv_has_stable_header_and_full_rows() {
        let grid = crossing_grid(3);
        let csv = grid.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,branch_1,branch_2,dplus_1,dplus_2,dminus_1,dminus_2"
        );
        assert_eq!(lines.count(), 3);
        assert!(csv.contains("-1.0000000000000000e0"));
    }

    proptest! {
        #[test]
        fn rearrangement_preserves_per_node_multisets(
            n_nodes in 3usize..12,
            m in 2usize..5
        ) {
            // Build a grid whose middle node clusters all branches with
            // distinct ascending derivatives: a full m-way crossing.
            let ts: Vec<f64> = (0..n_nodes).map(|i| i as f64).collect();
            let mid = n_nodes / 2;
            let mut values = Vec::new();
            let mut right = Vec::new();
            let mut left = Vec::new();
            for i in 0..n_nodes {
                let spread = (i as f64 - mid as f64).abs();
                values.push((0..m).map(|b| b as f64 * spread).collect());
                let d: Vec<f64> = (0..m).map(|b| b as f64 - (m as f64 - 1.0) / 2.0).collect();
                if i == mid {
                    right.push(d.clone());
                    left.push(d.iter().rev().copied().collect());
                } else {
                    right.push(d.clone());
                    left.push(d);
                }
            }
            let grid = CurveGrid {
                ts,
                values,
                right_derivs: right,
                left_derivs: left,
                right_second: None,
                left_second: None,
            };
            let plan = transversal_rearrange(&grid, 1e-8, 1e-6).unwrap();
            let rearranged = apply_plan(&grid, &plan).unwrap();
            for i in 0..grid.ts.len() {
                let mut got = rearranged.values[i].clone();
                got.sort_by(|a, b| a.partial_cmp(b).unwrap());
                prop_assert_eq!(&got, &grid.values[i]);
            }
        }
    }
}
