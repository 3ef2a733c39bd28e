//! Sensitivity system assembly: differentiating the equilibrium conditions
//! in the stacked parameter vector.
//!
//! Along a converged solution, differentiating each robot's optimality
//! conditions in `Theta` yields a linear system in the unknown trajectory
//! sensitivities `X^t = dx*/dTheta`, `U^t = du*/dTheta`, `L^t = dlambda*/dTheta`.
//! This module evaluates the required second-derivative blocks of the
//! Hamiltonian and terminal cost, stacks them over time into one block
//! equation per robot, and assembles each robot's view of the coupled global
//! system using only neighbor communication.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::cost::NeighborStates;
use crate::exec::map_robots;
use crate::fabric::Fabric;
use crate::game::GameProblem;
use crate::graph::RobotId;
use crate::nash::NashSolution;
use crate::{Error, Result};

/// Row/column layout of one robot's stacked unknown
/// `Y_i = [X^0..X^T; U^0..U^{T-1}; L^0..L^T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RobotStackLayout {
    pub n: usize,
    pub mu: usize,
    pub horizon: usize,
}

impl RobotStackLayout {
    pub fn x_off(&self, t: usize) -> usize {
        t * self.n
    }

    pub fn u_off(&self, t: usize) -> usize {
        (self.horizon + 1) * self.n + t * self.mu
    }

    pub fn lam_off(&self, t: usize) -> usize {
        (self.horizon + 1) * self.n + self.horizon * self.mu + t * self.n
    }

    /// Row count of `Y_i`; equals the equation row count of the robot's
    /// stacked system, so the global system is square.
    pub fn y_dim(&self) -> usize {
        2 * (self.horizon + 1) * self.n + self.horizon * self.mu
    }

    // Equation row offsets within the robot's stacked system.
    pub fn dyn_row(&self, t: usize) -> usize {
        t * self.n
    }

    pub fn stat_row(&self, t: usize) -> usize {
        self.horizon * self.n + t * self.mu
    }

    pub fn costate_row(&self, t: usize) -> usize {
        self.horizon * (self.n + self.mu) + t * self.n
    }

    pub fn terminal_row(&self) -> usize {
        self.horizon * (2 * self.n + self.mu)
    }

    pub fn initial_row(&self) -> usize {
        self.terminal_row() + self.n
    }

    pub fn row_dim(&self) -> usize {
        self.initial_row() + self.n
    }

    /// Split a stacked `Y` into per-step X, U, L blocks.
    pub fn unstack(
        &self,
        y: &DMatrix<f64>,
    ) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let cols = y.ncols();
        let xs = (0..=self.horizon)
            .map(|t| y.view((self.x_off(t), 0), (self.n, cols)).into_owned())
            .collect();
        let us = (0..self.horizon)
            .map(|t| y.view((self.u_off(t), 0), (self.mu, cols)).into_owned())
            .collect();
        let ls = (0..=self.horizon)
            .map(|t| y.view((self.lam_off(t), 0), (self.n, cols)).into_owned())
            .collect();
        (xs, us, ls)
    }
}

/// Second-derivative blocks of one robot's Hamiltonian and terminal cost,
/// evaluated along a converged solution. Parameter blocks span the full
/// stacked parameter vector (the robot's own columns are the only nonzero
/// ones, since its Hamiltonian depends on Theta only through its own theta).
#[derive(Debug, Clone)]
pub struct SensitivityBlocks {
    pub robot: RobotId,
    pub layout: RobotStackLayout,
    /// Global parameter count.
    pub r: usize,
    /// This robot's columns in the stacked parameter vector.
    pub theta_cols: std::ops::Range<usize>,
    /// State dim of each neighbor.
    pub nbr_dims: BTreeMap<RobotId, RobotStackLayout>,

    /// `df/dx` per step (also the costate-row coefficient transposed).
    pub f_x: Vec<DMatrix<f64>>,
    /// `df/du` per step.
    pub f_u: Vec<DMatrix<f64>>,
    /// `df/dTheta` per step, global columns.
    pub f_theta: Vec<DMatrix<f64>>,

    /// `d2H/du dx` per step.
    pub ham_ux: Vec<DMatrix<f64>>,
    /// `d2H/du du` per step.
    pub ham_uu: Vec<DMatrix<f64>>,
    /// `d2H/du dx_j` per step and neighbor.
    pub ham_u_nbr: Vec<BTreeMap<RobotId, DMatrix<f64>>>,
    /// `d2H/du dTheta` per step, global columns.
    pub ham_u_theta: Vec<DMatrix<f64>>,

    /// `d2H/dx dx` per step.
    pub ham_xx: Vec<DMatrix<f64>>,
    /// `d2H/dx du` per step (transpose of `ham_ux`).
    pub ham_xu: Vec<DMatrix<f64>>,
    /// `d2H/dx dx_j` per step and neighbor.
    pub ham_x_nbr: Vec<BTreeMap<RobotId, DMatrix<f64>>>,
    /// `d2H/dx dTheta` per step, global columns.
    pub ham_x_theta: Vec<DMatrix<f64>>,

    /// `d2h/dx dx` at the horizon.
    pub term_xx: DMatrix<f64>,
    /// `d2h/dx dx_j` at the horizon (terminal costs may couple neighbors).
    pub term_x_nbr: BTreeMap<RobotId, DMatrix<f64>>,
    /// `d2h/dx dTheta` at the horizon, global columns.
    pub term_x_theta: DMatrix<f64>,
}

fn ensure_finite(robot: RobotId, t: usize, block: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Assembly {
            robot,
            t,
            block: block.to_string(),
        });
    }
    Ok(())
}

/// Evaluate every second-derivative block along the solution.
pub fn assemble_blocks(
    game: &GameProblem,
    solution: &NashSolution,
) -> Result<BTreeMap<RobotId, SensitivityBlocks>> {
    let layout = game.theta_layout();
    let horizon = game.horizon;
    let results = map_robots(game.robot_count(), |idx| -> Result<SensitivityBlocks> {
        let robot = &game.robots[idx];
        let id = robot.id;
        let n = robot.state_dim();
        let mu = robot.input_dim();
        let r = layout.total;
        let theta_cols = layout.range(id);
        let weight_count = robot.cost.weight_count();
        let dyn_col0 = theta_cols.start + weight_count;
        let p = robot.dyn_params();
        let w = robot.weights();
        let xi = &solution.trajectories[&id];
        let lam = &solution.costates[&id];
        let neighbors = game.graph.neighbors(id);
        let nbr_dims: BTreeMap<RobotId, RobotStackLayout> = neighbors
            .iter()
            .map(|j| {
                (
                    *j,
                    RobotStackLayout {
                        n: game.robot(*j).state_dim(),
                        mu: game.robot(*j).input_dim(),
                        horizon,
                    },
                )
            })
            .collect();

        let mut blocks = SensitivityBlocks {
            robot: id,
            layout: RobotStackLayout { n, mu, horizon },
            r,
            theta_cols: theta_cols.clone(),
            nbr_dims,
            f_x: Vec::with_capacity(horizon),
            f_u: Vec::with_capacity(horizon),
            f_theta: Vec::with_capacity(horizon),
            ham_ux: Vec::with_capacity(horizon),
            ham_uu: Vec::with_capacity(horizon),
            ham_u_nbr: Vec::with_capacity(horizon),
            ham_u_theta: Vec::with_capacity(horizon),
            ham_xx: Vec::with_capacity(horizon),
            ham_xu: Vec::with_capacity(horizon),
            ham_x_nbr: Vec::with_capacity(horizon),
            ham_x_theta: Vec::with_capacity(horizon),
            term_xx: DMatrix::zeros(n, n),
            term_x_nbr: BTreeMap::new(),
            term_x_theta: DMatrix::zeros(n, r),
        };

        for t in 0..horizon {
            let x = &xi.x[t];
            let u = &xi.u[t];
            let lam_next = lam.at(t + 1);
            let entries: Vec<(RobotId, &DVector<f64>)> = neighbors
                .iter()
                .map(|j| (*j, &solution.trajectories[j].x[t]))
                .collect();
            let nbr = NeighborStates::new(&entries);

            let f_x = robot.dynamics.jac_x(x, u, p);
            let f_u = robot.dynamics.jac_u(x, u, p);
            let mut f_theta = DMatrix::zeros(n, r);
            if robot.dynamics.param_dim() > 0 {
                let jp = robot.dynamics.jac_p(x, u, p);
                f_theta
                    .view_mut((0, dyn_col0), (n, robot.dynamics.param_dim()))
                    .copy_from(&jp);
            }
            ensure_finite(id, t, "dynamics", &f_x)?;
            ensure_finite(id, t, "dynamics", &f_u)?;

            let ham_ux = robot.cost.hess_ux(t, n, mu, w) + robot.dynamics.vhp_ux(x, u, p, lam_next);
            let ham_uu = robot.cost.hess_uu(t, mu, w) + robot.dynamics.vhp_uu(x, u, p, lam_next);
            let ham_xx = robot.cost.hess_xx(t, x, nbr, w) + robot.dynamics.vhp_xx(x, u, p, lam_next);
            let ham_xu = ham_ux.transpose();
            ensure_finite(id, t, "input-input", &ham_uu)?;
            ensure_finite(id, t, "state-state", &ham_xx)?;

            let mut ham_u_theta = DMatrix::zeros(mu, r);
            let mut ham_x_theta = DMatrix::zeros(n, r);
            if weight_count > 0 {
                ham_u_theta
                    .view_mut((0, theta_cols.start), (mu, weight_count))
                    .copy_from(&robot.cost.dgrad_u_dw(t, u));
                ham_x_theta
                    .view_mut((0, theta_cols.start), (n, weight_count))
                    .copy_from(&robot.cost.dgrad_x_dw(t, x, nbr));
            }
            if robot.dynamics.param_dim() > 0 {
                let pd = robot.dynamics.param_dim();
                ham_u_theta
                    .view_mut((0, dyn_col0), (mu, pd))
                    .copy_from(&robot.dynamics.vhp_up(x, u, p, lam_next));
                ham_x_theta
                    .view_mut((0, dyn_col0), (n, pd))
                    .copy_from(&robot.dynamics.vhp_xp(x, u, p, lam_next));
            }
            ensure_finite(id, t, "input-parameter", &ham_u_theta)?;
            ensure_finite(id, t, "state-parameter", &ham_x_theta)?;

            let mut u_nbr = BTreeMap::new();
            let mut x_nbr = BTreeMap::new();
            for j in neighbors {
                let n_j = game.robot(*j).state_dim();
                let hu = robot.cost.hess_u_nbr(t, mu, n_j, w);
                let hx = robot.cost.hess_x_nbr(t, x, nbr, *j, n_j, w);
                ensure_finite(id, t, "state-neighbor", &hx)?;
                u_nbr.insert(*j, hu);
                x_nbr.insert(*j, hx);
            }

            blocks.f_x.push(f_x);
            blocks.f_u.push(f_u);
            blocks.f_theta.push(f_theta);
            blocks.ham_ux.push(ham_ux);
            blocks.ham_uu.push(ham_uu);
            blocks.ham_u_nbr.push(u_nbr);
            blocks.ham_u_theta.push(ham_u_theta);
            blocks.ham_xx.push(ham_xx);
            blocks.ham_xu.push(ham_xu);
            blocks.ham_x_nbr.push(x_nbr);
            blocks.ham_x_theta.push(ham_x_theta);
        }

        // Terminal blocks.
        let x_t = &xi.x[horizon];
        let entries: Vec<(RobotId, &DVector<f64>)> = neighbors
            .iter()
            .map(|j| (*j, &solution.trajectories[j].x[horizon]))
            .collect();
        let nbr = NeighborStates::new(&entries);
        blocks.term_xx = robot.cost.terminal_hess_xx(horizon, x_t, nbr, w);
        ensure_finite(id, horizon, "terminal state-state", &blocks.term_xx)?;
        if weight_count > 0 {
            blocks
                .term_x_theta
                .view_mut((0, theta_cols.start), (n, weight_count))
                .copy_from(&robot.cost.terminal_dgrad_x_dw(horizon, x_t, nbr));
        }
        for j in neighbors {
            let n_j = game.robot(*j).state_dim();
            let hx = robot
                .cost
                .terminal_hess_x_nbr(horizon, x_t, nbr, *j, n_j, w);
            ensure_finite(id, horizon, "terminal state-neighbor", &hx)?;
            blocks.term_x_nbr.insert(*j, hx);
        }
        Ok(blocks)
    });
    let mut out = BTreeMap::new();
    for res in results {
        let blocks = res?;
        out.insert(blocks.robot, blocks);
    }
    Ok(out)
}

/// One robot's stacked linear system `A_ii Y_i + sum_j A_ij Y_j + Cbar_i = 0`.
///
/// Row sections in order: dynamics rows for `t = 0..T-1`, input stationarity
/// rows for `t = 0..T-1`, costate rows for `t = 0..T-1` (the `t = 0` row
/// defines `L^0`, which no other equation uses), the terminal costate row,
/// and the initial condition `X^0 = 0`.
#[derive(Debug, Clone)]
pub struct StackedRobotSystem {
    pub robot: RobotId,
    pub layout: RobotStackLayout,
    pub a_ii: DMatrix<f64>,
    pub a_ij: BTreeMap<RobotId, DMatrix<f64>>,
    pub cbar: DMatrix<f64>,
}

/// Stack the per-step blocks over all time instances.
pub fn stack_time(blocks: &SensitivityBlocks) -> Result<StackedRobotSystem> {
    let lay = blocks.layout;
    let (n, mu, horizon) = (lay.n, lay.mu, lay.horizon);
    let rows = lay.row_dim();
    let r = blocks.r;
    if blocks.f_x.len() != horizon {
        return Err(Error::Shape(format!(
            "blocks cover {} steps, expected {horizon}",
            blocks.f_x.len()
        )));
    }
    let mut a_ii = DMatrix::zeros(rows, lay.y_dim());
    let mut cbar = DMatrix::zeros(rows, r);

    for t in 0..horizon {
        // Dynamics rows: f_x X^t + f_u U^t - X^{t+1} + f_theta = 0.
        let row = lay.dyn_row(t);
        a_ii.view_mut((row, lay.x_off(t)), (n, n)).copy_from(&blocks.f_x[t]);
        a_ii.view_mut((row, lay.u_off(t)), (n, mu)).copy_from(&blocks.f_u[t]);
        for k in 0..n {
            a_ii[(row + k, lay.x_off(t + 1) + k)] = -1.0;
        }
        cbar.view_mut((row, 0), (n, r)).copy_from(&blocks.f_theta[t]);

        // Stationarity rows: ham_ux X^t + ham_uu U^t + sum_j Q_j X_j^t
        //                    + f_u' L^{t+1} + ham_u_theta = 0.
        let row = lay.stat_row(t);
        a_ii.view_mut((row, lay.x_off(t)), (mu, n)).copy_from(&blocks.ham_ux[t]);
        a_ii.view_mut((row, lay.u_off(t)), (mu, mu)).copy_from(&blocks.ham_uu[t]);
        a_ii.view_mut((row, lay.lam_off(t + 1)), (mu, n))
            .copy_from(&blocks.f_u[t].transpose());
        cbar.view_mut((row, 0), (mu, r)).copy_from(&blocks.ham_u_theta[t]);

        // Costate rows: ham_xx X^t + ham_xu U^t + sum_j Q_j X_j^t
        //               + f_x' L^{t+1} - L^t + ham_x_theta = 0.
        let row = lay.costate_row(t);
        a_ii.view_mut((row, lay.x_off(t)), (n, n)).copy_from(&blocks.ham_xx[t]);
        a_ii.view_mut((row, lay.u_off(t)), (n, mu)).copy_from(&blocks.ham_xu[t]);
        a_ii.view_mut((row, lay.lam_off(t + 1)), (n, n))
            .copy_from(&blocks.f_x[t].transpose());
        for k in 0..n {
            a_ii[(row + k, lay.lam_off(t) + k)] = -1.0;
        }
        cbar.view_mut((row, 0), (n, r)).copy_from(&blocks.ham_x_theta[t]);
    }

    // Terminal: term_xx X^T + sum_j term_x_nbr X_j^T - L^T + term_x_theta = 0.
    let row = lay.terminal_row();
    a_ii.view_mut((row, lay.x_off(horizon)), (n, n)).copy_from(&blocks.term_xx);
    for k in 0..n {
        a_ii[(row + k, lay.lam_off(horizon) + k)] = -1.0;
    }
    cbar.view_mut((row, 0), (n, r)).copy_from(&blocks.term_x_theta);

    // Initial condition: X^0 = 0.
    let row = lay.initial_row();
    for k in 0..n {
        a_ii[(row + k, lay.x_off(0) + k)] = 1.0;
    }

    // Neighbor coupling blocks.
    let mut a_ij = BTreeMap::new();
    for (j, j_lay) in &blocks.nbr_dims {
        let mut a = DMatrix::zeros(rows, j_lay.y_dim());
        for t in 0..horizon {
            if let Some(q) = blocks.ham_u_nbr[t].get(j) {
                a.view_mut((lay.stat_row(t), j_lay.x_off(t)), (mu, j_lay.n))
                    .copy_from(q);
            }
            if let Some(q) = blocks.ham_x_nbr[t].get(j) {
                a.view_mut((lay.costate_row(t), j_lay.x_off(t)), (n, j_lay.n))
                    .copy_from(q);
            }
        }
        if let Some(q) = blocks.term_x_nbr.get(j) {
            a.view_mut((lay.terminal_row(), j_lay.x_off(horizon)), (n, j_lay.n))
                .copy_from(q);
        }
        a_ij.insert(*j, a);
    }

    Ok(StackedRobotSystem {
        robot: blocks.robot,
        layout: lay,
        a_ii,
        a_ij,
        cbar,
    })
}

/// Global block-row layout: where each robot's equation rows sit in the
/// stacked global system. Derivable by every robot from the shared game
/// structure alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalRowLayout {
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl GlobalRowLayout {
    pub fn new(game: &GameProblem) -> Self {
        let mut offsets = Vec::with_capacity(game.robot_count());
        let mut at = 0;
        for robot in &game.robots {
            offsets.push(at);
            let lay = RobotStackLayout {
                n: robot.state_dim(),
                mu: robot.input_dim(),
                horizon: game.horizon,
            };
            at += lay.row_dim();
        }
        GlobalRowLayout { offsets, total: at }
    }

    pub fn block(&self, i: RobotId) -> usize {
        self.offsets[i.0]
    }

    /// (row offset, row count) of robot `i`'s equation block.
    pub fn rows_of(&self, i: RobotId) -> (usize, usize) {
        let start = self.offsets[i.0];
        let end = self.offsets.get(i.0 + 1).copied().unwrap_or(self.total);
        (start, end - start)
    }
}

/// Robot `i`'s view of the global system: the vertical stack of every
/// robot's coupling block against `Y_i` (zero where no coupling exists) and
/// its own constant block placed at its block row.
#[derive(Debug, Clone)]
pub struct GlobalSystemView {
    pub robot: RobotId,
    /// `A_{l,i}` for `l` in `{i} ∪ N_i`; other block rows are zero.
    pub psi: BTreeMap<RobotId, DMatrix<f64>>,
    /// Own `Cbar_i` (placed at this robot's block row of the global system).
    pub chat: DMatrix<f64>,
    pub rows: GlobalRowLayout,
    pub layout: RobotStackLayout,
    pub r: usize,
    pub neighbors: Vec<RobotId>,
    /// This robot's columns in the stacked parameter vector.
    pub theta_cols: std::ops::Range<usize>,
}

/// Exchange coupling blocks with neighbors and form each robot's view of the
/// global system. Robot `i` sends `A_{i,j}` to each neighbor `j` and receives
/// `A_{l,i}` in return; non-neighbor blocks are zero by definition.
pub fn build_global_view(
    game: &GameProblem,
    stacked: &BTreeMap<RobotId, StackedRobotSystem>,
    fabric: &mut Fabric,
) -> Result<BTreeMap<RobotId, GlobalSystemView>> {
    let rows = GlobalRowLayout::new(game);
    let layout = game.theta_layout();
    let mut outbound: BTreeMap<RobotId, BTreeMap<RobotId, DMatrix<f64>>> = BTreeMap::new();
    for robot in &game.robots {
        let sys = stacked
            .get(&robot.id)
            .ok_or_else(|| Error::Shape(format!("missing stacked system for {}", robot.id)))?;
        let mut per_target = BTreeMap::new();
        for j in game.graph.neighbors(robot.id) {
            let block = sys.a_ij.get(j).cloned().ok_or_else(|| {
                Error::Shape(format!("robot {} lacks a coupling block for {j}", robot.id))
            })?;
            per_target.insert(*j, block);
        }
        outbound.insert(robot.id, per_target);
    }
    let mut inbound = fabric.exchange(outbound)?;

    let mut views = BTreeMap::new();
    for robot in &game.robots {
        let sys = &stacked[&robot.id];
        let mut psi = BTreeMap::new();
        psi.insert(robot.id, sys.a_ii.clone());
        let received = inbound.remove(&robot.id).unwrap_or_default();
        for j in game.graph.neighbors(robot.id) {
            let block = received.get(j).ok_or_else(|| {
                Error::Topology(format!("no coupling block received from neighbor {j}"))
            })?;
            psi.insert(*j, block.clone());
        }
        views.insert(
            robot.id,
            GlobalSystemView {
                robot: robot.id,
                psi,
                chat: sys.cbar.clone(),
                rows: rows.clone(),
                layout: sys.layout,
                r: layout.total,
                neighbors: game.graph.neighbors(robot.id).to_vec(),
                theta_cols: layout.range(robot.id),
            },
        );
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{CostModel, CostTerm};
    use crate::dynamics::DynamicsModel;
    use crate::game::RobotProblem;
    use crate::graph::CommGraph;
    use crate::nash::{solve_nash, ShootingConfig};

    /// Two coupled unicycles with every catalog block source active.
    fn small_unicycle_game() -> GameProblem {
        let graph = CommGraph::line(2).unwrap();
        let robots: Vec<RobotProblem> = (0..2)
            .map(|i| {
                let other = RobotId(1 - i);
                RobotProblem {
                    id: RobotId(i),
                    dynamics: DynamicsModel::GainUnicycle { dt: 0.2 },
                    cost: CostModel::new(vec![
                        CostTerm::formation(
                            vec![(other, DVector::from_vec(vec![0.5, -0.2]))],
                            (0, 2),
                        ),
                        CostTerm::collision(vec![(other, 0.2)], 2).unwrap(),
                        CostTerm::waypoint(
                            vec![(2, DVector::from_vec(vec![0.8, 0.3 * i as f64]))],
                            2,
                        ),
                        CostTerm::effort(DVector::from_vec(vec![0.2, 0.0])),
                    ]),
                    x0: DVector::from_vec(vec![i as f64 * 0.9, 0.1, 0.2]),
                    theta: DVector::from_vec(vec![0.8, 0.05, 1.0, 0.5, 1.1]),
                    radius: 0.1,
                }
            })
            .collect();
        GameProblem::new(graph, robots, 3, 0.2).unwrap()
    }

    fn solved(game: &GameProblem) -> NashSolution {
        let mut fabric = Fabric::new(game.graph.clone());
        solve_nash(
            game,
            &game.zero_inputs(),
            &ShootingConfig::new(0.05, 1e-7, 20000).unwrap(),
            &mut fabric,
        )
        .unwrap()
    }

    #[test]
    fn transpose_pairs_hold_exactly() {
        let game = small_unicycle_game();
        let sol = solved(&game);
        let blocks = assemble_blocks(&game, &sol).unwrap();
        for (_, b) in &blocks {
            for t in 0..game.horizon {
                assert_eq!(b.ham_xu[t], b.ham_ux[t].transpose());
            }
        }
    }

    #[test]
    fn parameter_blocks_vanish_outside_own_columns() {
        let game = small_unicycle_game();
        let sol = solved(&game);
        let blocks = assemble_blocks(&game, &sol).unwrap();
        for (id, b) in &blocks {
            let cols = b.theta_cols.clone();
            for t in 0..game.horizon {
                for c in 0..b.r {
                    if !cols.contains(&c) {
                        assert_eq!(b.ham_u_theta[t].column(c).amax(), 0.0, "robot {id} t={t}");
                        assert_eq!(b.ham_x_theta[t].column(c).amax(), 0.0);
                        assert_eq!(b.f_theta[t].column(c).amax(), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn stacked_system_is_equivalent_to_the_per_step_equations() {
        // Random Y assignment: evaluating the per-step equations row by row
        // must equal A_ii Y_i + sum_j A_ij Y_j + Cbar.
        let game = small_unicycle_game();
        let sol = solved(&game);
        let blocks = assemble_blocks(&game, &sol).unwrap();
        let r = game.theta_layout().total;
        let horizon = game.horizon;

        // Deterministic pseudo-random Y per robot.
        let mut ys = BTreeMap::new();
        for robot in &game.robots {
            let lay = blocks[&robot.id].layout;
            let y = DMatrix::from_fn(lay.y_dim(), r, |i, j| {
                (((i * 31 + j * 17 + robot.id.0 * 7) % 13) as f64 - 6.0) / 5.0
            });
            ys.insert(robot.id, y);
        }

        for robot in &game.robots {
            let b = &blocks[&robot.id];
            let sys = stack_time(b).unwrap();
            let lay = b.layout;
            let mut via_stack = &sys.a_ii * &ys[&robot.id] + &sys.cbar;
            for (j, a) in &sys.a_ij {
                via_stack += a * &ys[j];
            }

            let (xs, us, ls) = lay.unstack(&ys[&robot.id]);
            let mut direct = DMatrix::zeros(lay.row_dim(), r);
            for t in 0..horizon {
                let mut dyn_row = &b.f_x[t] * &xs[t] + &b.f_u[t] * &us[t] - &xs[t + 1];
                dyn_row += &b.f_theta[t];
                direct.view_mut((lay.dyn_row(t), 0), (lay.n, r)).copy_from(&dyn_row);

                let mut stat = &b.ham_ux[t] * &xs[t]
                    + &b.ham_uu[t] * &us[t]
                    + b.f_u[t].transpose() * &ls[t + 1]
                    + &b.ham_u_theta[t];
                for (j, q) in &b.ham_u_nbr[t] {
                    let (xj, _, _) = blocks[j].layout.unstack(&ys[j]);
                    stat += q * &xj[t];
                }
                direct.view_mut((lay.stat_row(t), 0), (lay.mu, r)).copy_from(&stat);

                let mut cost_row = &b.ham_xx[t] * &xs[t]
                    + &b.ham_xu[t] * &us[t]
                    + b.f_x[t].transpose() * &ls[t + 1]
                    - &ls[t]
                    + &b.ham_x_theta[t];
                for (j, q) in &b.ham_x_nbr[t] {
                    let (xj, _, _) = blocks[j].layout.unstack(&ys[j]);
                    cost_row += q * &xj[t];
                }
                direct
                    .view_mut((lay.costate_row(t), 0), (lay.n, r))
                    .copy_from(&cost_row);
            }
            let mut term = &b.term_xx * &xs[horizon] - &ls[horizon] + &b.term_x_theta;
            for (j, q) in &b.term_x_nbr {
                let (xj, _, _) = blocks[j].layout.unstack(&ys[j]);
                term += q * &xj[horizon];
            }
            direct
                .view_mut((lay.terminal_row(), 0), (lay.n, r))
                .copy_from(&term);
            direct
                .view_mut((lay.initial_row(), 0), (lay.n, r))
                .copy_from(&xs[0]);

            let diff = (&via_stack - &direct).amax();
            assert!(diff < 1e-12, "robot {}: mismatch {diff}", robot.id);
        }
    }

    #[test]
    fn blocks_match_finite_differences_of_first_derivatives() {
        use crate::oracles::fd;
        let game = small_unicycle_game();
        let sol = solved(&game);
        let blocks = assemble_blocks(&game, &sol).unwrap();
        let robot = &game.robots[0];
        let b = &blocks[&RobotId(0)];
        let t = 1;
        let xi = &sol.trajectories[&RobotId(0)];
        let lam = sol.costates[&RobotId(0)].at(t + 1).clone();
        let xj = sol.trajectories[&RobotId(1)].x[t].clone();
        let (x, u) = (xi.x[t].clone(), xi.u[t].clone());
        let w: Vec<f64> = robot.weights().to_vec();
        let p: Vec<f64> = robot.dyn_params().to_vec();

        // d/dx of dH/du == ham_ux.
        let (r2, u2, l2, xj2) = (robot.clone(), u.clone(), lam.clone(), xj.clone());
        let fd_ux = fd::jacobian(
            move |xv| {
                let entries = vec![(RobotId(1), &xj2)];
                let nbr = NeighborStates::new(&entries);
                r2.cost.grad_u(t, xv, &u2, nbr, &w)
                    + r2.dynamics.jac_u(xv, &u2, &p).transpose() * &l2
            },
            &x,
            2,
        );
        assert!(fd::rel_err_mat(&b.ham_ux[t], &fd_ux) < 1e-4);

        // d/dx_j of dH/dx == ham_x_nbr.
        let w: Vec<f64> = robot.weights().to_vec();
        let p: Vec<f64> = robot.dyn_params().to_vec();
        let (r2, x2, u2, l2) = (robot.clone(), x.clone(), u.clone(), lam.clone());
        let fd_xj = fd::jacobian(
            move |xjv| {
                let entries = vec![(RobotId(1), xjv)];
                let nbr = NeighborStates::new(&entries);
                r2.cost.grad_x(t, &x2, nbr, &w)
                    + r2.dynamics.jac_x(&x2, &u2, &p).transpose() * &l2
            },
            &xj,
            3,
        );
        assert!(fd::rel_err_mat(&b.ham_x_nbr[t][&RobotId(1)], &fd_xj) < 1e-4);
    }

    #[test]
    fn no_neighbors_means_no_coupling_blocks() {
        let graph = CommGraph::new(1, &[]).unwrap();
        let robots = vec![RobotProblem {
            id: RobotId(0),
            dynamics: DynamicsModel::SingleIntegrator { dim: 2, dt: 0.1 },
            cost: CostModel::new(vec![
                CostTerm::state_target(DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![1.0, 1.0])),
                CostTerm::effort(DVector::zeros(2)),
            ]),
            x0: DVector::zeros(2),
            theta: DVector::from_vec(vec![1.0, 0.5]),
            radius: 0.1,
        }];
        let game = GameProblem::new(graph, robots, 4, 0.1).unwrap();
        let sol = solved(&game);
        let blocks = assemble_blocks(&game, &sol).unwrap();
        let sys = stack_time(&blocks[&RobotId(0)]).unwrap();
        assert!(sys.a_ij.is_empty());
        for t in 0..game.horizon {
            assert!(blocks[&RobotId(0)].ham_x_nbr[t].is_empty());
        }
    }

    #[test]
    fn lq_game_blocks_are_constant_over_time() {
        let graph = CommGraph::line(2).unwrap();
        let robots: Vec<RobotProblem> = (0..2)
            .map(|i| RobotProblem {
                id: RobotId(i),
                dynamics: DynamicsModel::DoubleIntegrator { dim: 1, dt: 0.2 },
                cost: CostModel::new(vec![
                    CostTerm::state_target(
                        DVector::from_vec(vec![1.0 + i as f64, 0.0]),
                        DVector::from_vec(vec![1.0, 0.2]),
                    ),
                    CostTerm::formation(
                        vec![(RobotId(1 - i), DVector::from_vec(vec![-0.5]))],
                        (0, 1),
                    ),
                    CostTerm::effort(DVector::zeros(1)),
                ]),
                x0: DVector::from_vec(vec![i as f64, 0.0]),
                theta: DVector::from_vec(vec![1.0, 0.4, 0.8]),
                radius: 0.1,
            })
            .collect();
        let game = GameProblem::new(graph, robots, 5, 0.2).unwrap();
        let sol = solved(&game);
        let blocks = assemble_blocks(&game, &sol).unwrap();
        for (_, b) in &blocks {
            for t in 1..game.horizon {
                assert_eq!(b.ham_xx[t], b.ham_xx[0]);
                assert_eq!(b.ham_uu[t], b.ham_uu[0]);
                assert_eq!(b.f_x[t], b.f_x[0]);
                assert_eq!(b.f_u[t], b.f_u[0]);
            }
        }
    }

    #[test]
    fn view_stacks_follow_the_two_robot_pattern() {
        let game = small_unicycle_game();
        let sol = solved(&game);
        let blocks = assemble_blocks(&game, &sol).unwrap();
        let stacked: BTreeMap<RobotId, StackedRobotSystem> = blocks
            .iter()
            .map(|(id, b)| (*id, stack_time(b).unwrap()))
            .collect();
        let mut fabric = Fabric::new(game.graph.clone());
        let views = build_global_view(&game, &stacked, &mut fabric).unwrap();
        // Psi_0 = [A_00; A_10], Psi_1 = [A_01; A_11].
        let v0 = &views[&RobotId(0)];
        assert_eq!(v0.psi.len(), 2);
        assert_eq!(v0.psi[&RobotId(0)], stacked[&RobotId(0)].a_ii);
        assert_eq!(v0.psi[&RobotId(1)], stacked[&RobotId(1)].a_ij[&RobotId(0)]);
        let v1 = &views[&RobotId(1)];
        assert_eq!(v1.psi[&RobotId(1)], stacked[&RobotId(1)].a_ii);
        assert_eq!(v1.psi[&RobotId(0)], stacked[&RobotId(0)].a_ij[&RobotId(1)]);
    }

    #[test]
    fn line_graph_views_have_zero_blocks_for_non_neighbors() {
        // 3-robot line 0-1-2: Psi_0 must have no block row for robot 2.
        let graph = CommGraph::line(3).unwrap();
        let robots: Vec<RobotProblem> = (0..3)
            .map(|i| {
                let mut pairs = Vec::new();
                if i > 0 {
                    pairs.push((RobotId(i - 1), DVector::from_vec(vec![0.5, 0.0])));
                }
                if i < 2 {
                    pairs.push((RobotId(i + 1), DVector::from_vec(vec![-0.5, 0.0])));
                }
                RobotProblem {
                    id: RobotId(i),
                    dynamics: DynamicsModel::SingleIntegrator { dim: 2, dt: 0.1 },
                    cost: CostModel::new(vec![
                        CostTerm::formation(pairs, (0, 2)),
                        CostTerm::effort(DVector::zeros(2)),
                    ]),
                    x0: DVector::from_vec(vec![i as f64, 0.0]),
                    theta: DVector::from_vec(vec![1.0, 0.5]),
                    radius: 0.1,
                }
            })
            .collect();
        let game = GameProblem::new(graph, robots, 3, 0.1).unwrap();
        let sol = solved(&game);
        let blocks = assemble_blocks(&game, &sol).unwrap();
        let stacked: BTreeMap<RobotId, StackedRobotSystem> = blocks
            .iter()
            .map(|(id, b)| (*id, stack_time(b).unwrap()))
            .collect();
        let mut fabric = Fabric::new(game.graph.clone());
        let views = build_global_view(&game, &stacked, &mut fabric).unwrap();
        assert!(!views[&RobotId(0)].psi.contains_key(&RobotId(2)));
        assert!(!views[&RobotId(2)].psi.contains_key(&RobotId(0)));
        assert_eq!(views[&RobotId(1)].psi.len(), 3);
    }
}
