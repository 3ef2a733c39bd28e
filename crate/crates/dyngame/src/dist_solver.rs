//! Distributed iterative solver for the coupled sensitivity system.
//!
//! Every robot owns one block equation of the global linear system. The
//! solver iterates a primal state `Y_i` per robot together with an auxiliary
//! edge-coupled state `Z_i`; each round the robots exchange their `Z` blocks
//! with graph neighbors, evaluate the local residual
//! `v_i = Psi_i Y_i + Chat_i - sum_{l in N_i} (Z_i - Z_l)`, and step
//! `Y_i -= alpha Psi_i' v_i`, `Z_i += alpha v_i`. Because the graph is
//! undirected, the `Z` differences telescope away in the sum over robots, so
//! any fixed point solves the assembled global system.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};

use crate::exec::map_robots;
use crate::fabric::Fabric;
use crate::graph::RobotId;
use crate::sensitivity::{GlobalSystemView, RobotStackLayout};
use crate::{Error, Result};

/// Configuration of the distributed solve.
#[derive(Debug, Clone, PartialEq)]
pub struct DistConfig {
    /// Step size; `None` selects `0.9 / (max_i ||Psi_i||_2^2 + 2 max_degree)`,
    /// recomputed for the system at hand.
    pub alpha: Option<f64>,
    /// Termination tolerance on `max_i max |v_i|`.
    pub eps_v: f64,
    pub max_iters: usize,
    /// Record per-iteration, per-robot residuals.
    pub record_trace: bool,
}

impl Default for DistConfig {
    fn default() -> Self {
        DistConfig {
            alpha: None,
            eps_v: 1e-9,
            max_iters: 200_000,
            record_trace: false,
        }
    }
}

/// Result of a distributed solve, including the auxiliary states so callers
/// can warm-start the next solve.
#[derive(Debug, Clone)]
pub struct DistSolveResult {
    pub y: BTreeMap<RobotId, DMatrix<f64>>,
    pub z: BTreeMap<RobotId, DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub trace: Option<Vec<Vec<f64>>>,
}

/// Local residual of robot `i` given its own states and the neighbors' `Z`
/// blocks. The sign convention is chosen so that summing `v_i` over all
/// robots reproduces the global equation exactly (the `Z` differences cancel
/// pairwise over undirected edges).
pub fn local_residual(
    view: &GlobalSystemView,
    y_i: &DMatrix<f64>,
    z_i: &DMatrix<f64>,
    neighbor_z: &BTreeMap<RobotId, DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let provided: Vec<RobotId> = neighbor_z.keys().copied().collect();
    if provided != view.neighbors {
        return Err(Error::Topology(format!(
            "robot {}: neighbor Z blocks cover {provided:?}, expected {:?}",
            view.robot, view.neighbors
        )));
    }
    let mut v = DMatrix::zeros(view.rows.total, view.r);
    for (l, a) in &view.psi {
        let (off, len) = view.rows.rows_of(*l);
        let mut rows = v.rows_mut(off, len);
        rows.gemm(1.0, a, y_i, 1.0);
    }
    let (off, len) = view.rows.rows_of(view.robot);
    v.rows_mut(off, len).add_assign(&view.chat);
    let deg = view.neighbors.len() as f64;
    v.zip_apply(z_i, |a, b| *a -= deg * b);
    for z_l in neighbor_z.values() {
        v += z_l;
    }
    Ok(v)
}

/// Iteration state, exposed so tests can drive single rounds and inspect the
/// residual blocks.
#[derive(Debug, Clone)]
pub struct DistState {
    pub ids: Vec<RobotId>,
    pub views: Vec<GlobalSystemView>,
    pub y: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
    /// Residual blocks of the last completed round.
    pub v: Vec<DMatrix<f64>>,
    pub alpha: f64,
}

impl DistState {
    /// Zero-initialized state (the reproducible default).
    pub fn new(views: BTreeMap<RobotId, GlobalSystemView>, alpha: Option<f64>) -> Result<Self> {
        let alpha = match alpha {
            Some(a) if a > 0.0 => a,
            Some(a) => {
                return Err(Error::Config(format!("alpha must be positive, got {a}")));
            }
            None => default_alpha(&views),
        };
        let ids: Vec<RobotId> = views.keys().copied().collect();
        let mut view_vec = Vec::with_capacity(ids.len());
        let mut y = Vec::with_capacity(ids.len());
        let mut z = Vec::with_capacity(ids.len());
        let mut v = Vec::with_capacity(ids.len());
        for (_, view) in views {
            let y_dim = view.layout.y_dim();
            y.push(DMatrix::zeros(y_dim, view.r));
            z.push(DMatrix::zeros(view.rows.total, view.r));
            v.push(DMatrix::zeros(view.rows.total, view.r));
            view_vec.push(view);
        }
        Ok(DistState {
            ids,
            views: view_vec,
            y,
            z,
            v,
            alpha,
        })
    }

    /// Resume from previous primal/auxiliary states (warm start).
    pub fn with_state(mut self, y: Vec<DMatrix<f64>>, z: Vec<DMatrix<f64>>) -> Result<Self> {
        if y.len() != self.y.len() || z.len() != self.z.len() {
            return Err(Error::Shape("warm-start state count mismatch".into()));
        }
        for (a, b) in self.y.iter().zip(&y) {
            if a.shape() != b.shape() {
                return Err(Error::Shape("warm-start Y shape mismatch".into()));
            }
        }
        for (a, b) in self.z.iter().zip(&z) {
            if a.shape() != b.shape() {
                return Err(Error::Shape("warm-start Z shape mismatch".into()));
            }
        }
        self.y = y;
        self.z = z;
        Ok(self)
    }

    /// One synchronous round: exchange `Z`, evaluate residuals, and apply the
    /// updates unless every residual is already within `eps_v`. Returns the
    /// round residual and whether the state advanced.
    pub fn step(&mut self, fabric: &mut Fabric, eps_v: f64) -> Result<(f64, bool)> {
        let m = self.ids.len();
        // Ship Z blocks to every neighbor.
        let mut outbound: BTreeMap<RobotId, BTreeMap<RobotId, DMatrix<f64>>> = BTreeMap::new();
        for (idx, id) in self.ids.iter().enumerate() {
            let mut per_target = BTreeMap::new();
            for j in &self.views[idx].neighbors {
                per_target.insert(*j, self.z[idx].clone());
            }
            outbound.insert(*id, per_target);
        }
        let mut inbound = fabric.exchange(outbound)?;
        let neighbor_z: Vec<BTreeMap<RobotId, DMatrix<f64>>> = self
            .ids
            .iter()
            .map(|id| inbound.remove(id).unwrap_or_default())
            .collect();

        let vs: Vec<Result<DMatrix<f64>>> = map_robots(m, |idx| {
            local_residual(
                &self.views[idx],
                &self.y[idx],
                &self.z[idx],
                &neighbor_z[idx],
            )
        });
        let mut residual = 0.0_f64;
        for (idx, res) in vs.into_iter().enumerate() {
            self.v[idx] = res?;
            residual = residual.max(self.v[idx].amax());
        }
        if !residual.is_finite() {
            return Err(Error::StepSize {
                growth: f64::INFINITY,
            });
        }
        if residual <= eps_v {
            return Ok((residual, false));
        }

        let alpha = self.alpha;
        let updates: Vec<DMatrix<f64>> = map_robots(m, |idx| {
            let view = &self.views[idx];
            let mut grad = DMatrix::zeros(view.layout.y_dim(), view.r);
            for (l, a) in &view.psi {
                let (off, len) = view.rows.rows_of(*l);
                let v_rows = self.v[idx].rows(off, len);
                grad.gemm_tr(1.0, a, &v_rows.into_owned(), 1.0);
            }
            grad
        });
        for idx in 0..m {
            self.y[idx].zip_apply(&updates[idx], |a, b| *a -= alpha * b);
            self.z[idx].zip_apply(&self.v[idx], |a, b| *a += alpha * b);
        }
        Ok((residual, true))
    }
}

/// Spectral-norm based default step size.
fn default_alpha(views: &BTreeMap<RobotId, GlobalSystemView>) -> f64 {
    let mut worst = 0.0_f64;
    let mut max_deg = 0usize;
    for view in views.values() {
        max_deg = max_deg.max(view.neighbors.len());
        // lambda_max of Psi_i' Psi_i via the stacked blocks.
        let d = view.layout.y_dim();
        let mut gram = DMatrix::zeros(d, d);
        for a in view.psi.values() {
            gram.gemm_tr(1.0, a, a, 1.0);
        }
        let eig = gram.symmetric_eigenvalues();
        let lmax = eig.iter().cloned().fold(0.0_f64, f64::max);
        worst = worst.max(lmax);
    }
    0.9 / (worst + 2.0 * max_deg as f64)
}

/// Run the distributed iteration until `max_i max|v_i| <= eps_v` or the cap.
///
/// `warm` resumes from a previous solve's `(Y, Z)` pair. A residual that
/// grows past ten times its initial value aborts with a step-size error.
pub fn solve_distributed(
    views: BTreeMap<RobotId, GlobalSystemView>,
    fabric: &mut Fabric,
    cfg: &DistConfig,
    warm: Option<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)>,
) -> Result<DistSolveResult> {
    if cfg.eps_v <= 0.0 {
        return Err(Error::Config("eps_v must be positive".into()));
    }
    let mut state = DistState::new(views, cfg.alpha)?;
    if let Some((y, z)) = warm {
        state = state.with_state(y, z)?;
    }
    let mut trace = cfg.record_trace.then(Vec::new);
    let mut first_residual: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;

    for round in 0..cfg.max_iters {
        let (res, advanced) = state.step(fabric, cfg.eps_v)?;
        residual = res;
        iterations = round + 1;
        if let Some(tr) = trace.as_mut() {
            tr.push(state.v.iter().map(|v| v.amax()).collect());
        }
        let base = *first_residual.get_or_insert(res.max(f64::MIN_POSITIVE));
        if res > 10.0 * base && res > cfg.eps_v {
            return Err(Error::StepSize { growth: res / base });
        }
        if !advanced {
            converged = true;
            break;
        }
    }

    let y = state
        .ids
        .iter()
        .cloned()
        .zip(state.y.iter().cloned())
        .collect();
    let z = state
        .ids
        .iter()
        .cloned()
        .zip(state.z.iter().cloned())
        .collect();
    Ok(DistSolveResult {
        y,
        z,
        converged,
        iterations,
        final_residual: residual,
        trace,
    })
}

/// Per-robot trajectory sensitivity restricted to the robot's own parameter
/// columns, in the canonical `x^0..x^T, u^0..u^{T-1}` row order.
#[derive(Debug, Clone)]
pub struct RobotSensitivity {
    pub robot: RobotId,
    /// `(T+1) n x r_i`.
    pub x_stack: DMatrix<f64>,
    /// `T mu x r_i`.
    pub u_stack: DMatrix<f64>,
    /// Parameters the sensitivity was computed at (staleness guard).
    pub theta_tag: DVector<f64>,
}

impl RobotSensitivity {
    /// Jacobian of the flattened trajectory with respect to own parameters.
    pub fn traj_jacobian(&self) -> DMatrix<f64> {
        let rows = self.x_stack.nrows() + self.u_stack.nrows();
        let cols = self.x_stack.ncols();
        let mut out = DMatrix::zeros(rows, cols);
        out.rows_mut(0, self.x_stack.nrows()).copy_from(&self.x_stack);
        out.rows_mut(self.x_stack.nrows(), self.u_stack.nrows())
            .copy_from(&self.u_stack);
        out
    }
}

/// Full-parameter state/input sensitivities (all columns of the stacked
/// parameter vector), for oracle comparisons.
pub fn unstack_full(y: &DMatrix<f64>, layout: RobotStackLayout) -> (DMatrix<f64>, DMatrix<f64>) {
    let r = y.ncols();
    let x_rows = (layout.horizon + 1) * layout.n;
    let u_rows = layout.horizon * layout.mu;
    let x = y.view((0, 0), (x_rows, r)).into_owned();
    let u = y.view((layout.u_off(0), 0), (u_rows, r)).into_owned();
    (x, u)
}

/// Slice a solved `Y_i` down to the robot's own parameter columns.
pub fn extract_sensitivity(
    y: &DMatrix<f64>,
    layout: RobotStackLayout,
    theta_cols: std::ops::Range<usize>,
    robot: RobotId,
    theta_tag: DVector<f64>,
) -> Result<RobotSensitivity> {
    if y.nrows() != layout.y_dim() {
        return Err(Error::Shape(format!(
            "Y has {} rows, expected {}",
            y.nrows(),
            layout.y_dim()
        )));
    }
    if theta_cols.end > y.ncols() {
        return Err(Error::Shape(format!(
            "theta columns {theta_cols:?} out of range for {} columns",
            y.ncols()
        )));
    }
    let (x_full, u_full) = unstack_full(y, layout);
    let r_i = theta_cols.len();
    let x_stack = x_full.columns(theta_cols.start, r_i).into_owned();
    let u_stack = u_full.columns(theta_cols.start, r_i).into_owned();
    Ok(RobotSensitivity {
        robot,
        x_stack,
        u_stack,
        theta_tag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CommGraph;
    use crate::sensitivity::GlobalRowLayout;

    /// Hand-built views for arbitrary (non-game) systems.
    pub(crate) fn make_views(
        graph: &CommGraph,
        row_dims: &[usize],
        y_dims: &[usize],
        r: usize,
        a_blocks: &BTreeMap<(usize, usize), DMatrix<f64>>,
        cbars: &[DMatrix<f64>],
    ) -> BTreeMap<RobotId, GlobalSystemView> {
        let mut offsets = Vec::new();
        let mut at = 0;
        for d in row_dims {
            offsets.push(at);
            at += d;
        }
        let rows = GlobalRowLayout { offsets, total: at };
        let m = row_dims.len();
        let mut views = BTreeMap::new();
        for i in 0..m {
            let mut psi = BTreeMap::new();
            for l in 0..m {
                if let Some(a) = a_blocks.get(&(l, i)) {
                    psi.insert(RobotId(l), a.clone());
                }
            }
            views.insert(
                RobotId(i),
                GlobalSystemView {
                    robot: RobotId(i),
                    psi,
                    chat: cbars[i].clone(),
                    rows: rows.clone(),
                    layout: RobotStackLayout {
                        n: y_dims[i],
                        mu: 0,
                        horizon: 0,
                    },
                    r,
                    neighbors: graph.neighbors(RobotId(i)).to_vec(),
                    theta_cols: 0..0,
                },
            );
        }
        views
    }

    fn seeded_matrix(rows: usize, cols: usize, seed: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |i, j| {
            let h = (i * 2654435761 + j * 40503 + seed * 97) % 2000;
            h as f64 / 1000.0 - 1.0
        })
    }

    /// Layout note: these synthetic views use `horizon = 0`, so `y_dim()`
    /// reduces to `2 * n`, i.e. `y_dims[i]` must be half the actual Y rows.
    /// To keep things readable the builders below use `n = y_rows / 2`.
    fn two_robot_scalar_system() -> (CommGraph, BTreeMap<RobotId, GlobalSystemView>) {
        // One global equation row: y_0 + y_1 - 2 = 0 (scalar blocks).
        let graph = CommGraph::line(2).unwrap();
        let mut blocks = BTreeMap::new();
        blocks.insert((0, 0), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        blocks.insert((0, 1), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let cbars = vec![
            DMatrix::from_row_slice(1, 1, &[-2.0]),
            DMatrix::zeros(0, 1),
        ];
        // Robot 1 contributes no rows of its own; give it zero-height cbar.
        let views = make_views(&graph, &[1, 0], &[1, 1], 1, &blocks, &cbars);
        (graph, views)
    }

    #[test]
    fn scalar_two_robot_sum_constraint_is_solved() {
        let (graph, views) = two_robot_scalar_system();
        let mut fabric = Fabric::new(graph).with_row_log(false);
        let cfg = DistConfig {
            alpha: Some(0.2),
            eps_v: 1e-12,
            max_iters: 20_000,
            record_trace: false,
        };
        let result = solve_distributed(views.clone(), &mut fabric, &cfg, None).unwrap();
        assert!(result.converged);
        // Check the global equation: first Y coordinate of each robot sums to 2.
        let y0 = result.y[&RobotId(0)][(0, 0)];
        let y1 = result.y[&RobotId(1)][(0, 0)];
        assert!(
            (y0 + y1 - 2.0).abs() < 1e-10,
            "sum constraint violated: {y0} + {y1}"
        );
    }

    #[test]
    fn single_robot_residual_is_psi_y_plus_c() {
        let graph = CommGraph::new(1, &[]).unwrap();
        let mut blocks = BTreeMap::new();
        blocks.insert((0, 0), seeded_matrix(4, 2, 1));
        let cbars = vec![seeded_matrix(4, 3, 2)];
        let views = make_views(&graph, &[4], &[1], 3, &blocks, &cbars);
        let view = &views[&RobotId(0)];
        let y = seeded_matrix(2, 3, 3);
        let z = seeded_matrix(4, 3, 4);
        let v = local_residual(view, &y, &z, &BTreeMap::new()).unwrap();
        let expect = &view.psi[&RobotId(0)] * &y + &view.chat;
        assert!((v - expect).amax() < 1e-14);
    }

    #[test]
    fn equal_z_blocks_cancel_in_the_residual() {
        let (_, views) = two_robot_scalar_system();
        let view = &views[&RobotId(0)];
        let y = DMatrix::zeros(2, 1);
        let z = seeded_matrix(1, 1, 7);
        let mut nz = BTreeMap::new();
        nz.insert(RobotId(1), z.clone());
        let v = local_residual(view, &y, &z, &nz).unwrap();
        assert!((v - &view.chat).amax() < 1e-14, "v should equal Chat");
    }

    #[test]
    fn missing_neighbor_z_is_a_topology_error() {
        let (_, views) = two_robot_scalar_system();
        let view = &views[&RobotId(0)];
        let y = DMatrix::zeros(2, 1);
        let z = DMatrix::zeros(1, 1);
        let err = local_residual(view, &y, &z, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Topology(_)));
    }

    #[test]
    fn telescoping_identity_holds_at_every_iteration() {
        // 100 random consistent systems over graphs with up to 5 robots.
        for seed in 0..100usize {
            let m = 2 + seed % 4;
            let graph = match seed % 3 {
                0 => CommGraph::complete(m).unwrap(),
                1 => CommGraph::line(m).unwrap(),
                _ => {
                    let mut edges: Vec<(usize, usize)> = (1..m).map(|i| (i - 1, i)).collect();
                    if m > 2 {
                        edges.push((0, m - 1));
                    }
                    CommGraph::new(m, &edges).unwrap()
                }
            };
            let r = 1 + seed % 3;
            let row_dims: Vec<usize> = (0..m).map(|i| 2 + (seed + i) % 3).collect();
            let y_dims: Vec<usize> = (0..m).map(|i| 1 + (seed + 2 * i) % 2).collect();

            // Consistent by construction: pick Y*, set Cbar_l = -sum_i A_li Y*_i.
            let mut a_blocks = BTreeMap::new();
            let mut y_star = Vec::new();
            for i in 0..m {
                y_star.push(seeded_matrix(2 * y_dims[i], r, seed * 31 + i));
            }
            for l in 0..m {
                a_blocks.insert(
                    (l, l),
                    seeded_matrix(row_dims[l], 2 * y_dims[l], seed * 7 + l),
                );
                for j in graph.neighbors(RobotId(l)) {
                    a_blocks.insert(
                        (l, j.0),
                        seeded_matrix(row_dims[l], 2 * y_dims[j.0], seed * 13 + l * 5 + j.0),
                    );
                }
            }
            let mut cbars = Vec::new();
            for l in 0..m {
                let mut c = DMatrix::zeros(row_dims[l], r);
                for i in 0..m {
                    if let Some(a) = a_blocks.get(&(l, i)) {
                        c.gemm(-1.0, a, &y_star[i], 1.0);
                    }
                }
                cbars.push(c);
            }
            let views = make_views(&graph, &row_dims, &y_dims, r, &a_blocks, &cbars);
            let mut fabric = Fabric::new(graph).with_row_log(false);
            // Auto step size keeps the iterates bounded, so the 1e-12
            // comparison below is not polluted by float growth.
            let mut state = DistState::new(views, None).unwrap();

            for round in 0..30 {
                state.step(&mut fabric, f64::MIN_POSITIVE).unwrap();
                // sum_i v_i must equal sum_i (Psi_i Y_i + Chat_i) exactly.
                let total_rows = state.views[0].rows.total;
                let mut lhs = DMatrix::zeros(total_rows, r);
                for v in &state.v {
                    lhs += v;
                }
                let mut rhs = DMatrix::zeros(total_rows, r);
                for idx in 0..state.ids.len() {
                    let view = &state.views[idx];
                    for (l, a) in &view.psi {
                        let (off, len) = view.rows.rows_of(*l);
                        rhs.rows_mut(off, len).gemm(1.0, a, &state.y[idx], 1.0);
                    }
                    let (off, len) = view.rows.rows_of(view.robot);
                    rhs.rows_mut(off, len).add_assign(&view.chat);
                }
                let gap = (lhs - rhs).amax();
                assert!(
                    gap < 1e-12,
                    "seed {seed} round {round}: telescoping gap {gap}"
                );
            }
        }
    }

    #[test]
    fn diverging_step_size_reports_a_step_size_error() {
        let (graph, views) = two_robot_scalar_system();
        let mut fabric = Fabric::new(graph).with_row_log(false);
        let cfg = DistConfig {
            alpha: Some(50.0),
            eps_v: 1e-12,
            max_iters: 1000,
            record_trace: false,
        };
        let err = solve_distributed(views, &mut fabric, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::StepSize { .. }));
    }

    #[test]
    fn extraction_slices_theta_columns() {
        let layout = RobotStackLayout {
            n: 1,
            mu: 1,
            horizon: 2,
        };
        // y_dim = 2*3*1 + 2 = 8 rows, 3 global params, own columns 1..2.
        let y = seeded_matrix(layout.y_dim(), 3, 5);
        let sens = extract_sensitivity(&y, layout, 1..2, RobotId(0), DVector::zeros(1)).unwrap();
        assert_eq!(sens.x_stack.nrows(), 3);
        assert_eq!(sens.u_stack.nrows(), 2);
        assert_eq!(sens.x_stack.ncols(), 1);
        for t in 0..3 {
            assert_eq!(sens.x_stack[(t, 0)], y[(t, 1)]);
        }
        for t in 0..2 {
            assert_eq!(sens.u_stack[(t, 0)], y[(3 + t, 1)]);
        }
        let jac = sens.traj_jacobian();
        assert_eq!(jac.nrows(), 5);
    }
}
