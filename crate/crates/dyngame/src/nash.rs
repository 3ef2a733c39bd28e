//! Forward problem: Hamiltonian machinery and the distributed shooting-based
//! Nash-equilibrium solver.
//!
//! Each round, every robot rolls its dynamics out under its current input
//! sequence, ships the state sequence to its graph neighbors through the
//! fabric, rolls the costate equation backwards, and descends the input
//! stationarity residual. States therefore always satisfy the dynamics and
//! costates always satisfy the backward recursion; only the input update
//! iterates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::cost::NeighborStates;
use crate::exec::map_robots;
use crate::fabric::Fabric;
use crate::game::{eval_objective, rollout, GameProblem, RobotProblem, Trajectory};
use crate::graph::RobotId;
use crate::{Error, Result};

/// Costate sequence `lambda^{1:T}` of one robot.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateTrajectory {
    lambda: Vec<DVector<f64>>,
}

impl CostateTrajectory {
    pub fn new(lambda: Vec<DVector<f64>>) -> Self {
        CostateTrajectory { lambda }
    }

    pub fn horizon(&self) -> usize {
        self.lambda.len()
    }

    /// `lambda^t` for `t` in `1..=T`.
    pub fn at(&self, t: usize) -> &DVector<f64> {
        assert!(t >= 1 && t <= self.lambda.len(), "costate index {t}");
        &self.lambda[t - 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.lambda.iter()
    }
}

/// Optional per-round step-size backtracking on the local objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backtracking {
    /// Multiplicative shrink applied while the local objective increases.
    pub shrink: f64,
    pub max_steps: u32,
}

impl Default for Backtracking {
    fn default() -> Self {
        Backtracking {
            shrink: 0.5,
            max_steps: 20,
        }
    }
}

/// Shooting-solver configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootingConfig {
    /// Input update step size (shared by all robots unless overridden).
    pub gamma: f64,
    /// Per-robot step sizes, overriding `gamma` where present.
    pub per_robot_gamma: Option<Vec<f64>>,
    /// Termination tolerance on the max-norm of the input update.
    pub eps_u: f64,
    pub max_iters: usize,
    pub backtracking: Option<Backtracking>,
}

impl ShootingConfig {
    pub fn new(gamma: f64, eps_u: f64, max_iters: usize) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if eps_u <= 0.0 {
            return Err(Error::Config("eps_u must be positive".into()));
        }
        Ok(ShootingConfig {
            gamma,
            per_robot_gamma: None,
            eps_u,
            max_iters,
            backtracking: None,
        })
    }

    pub fn with_backtracking(mut self, bt: Backtracking) -> Self {
        self.backtracking = Some(bt);
        self
    }

    fn gamma_for(&self, i: usize) -> f64 {
        self.per_robot_gamma
            .as_ref()
            .and_then(|g| g.get(i).copied())
            .unwrap_or(self.gamma)
    }
}

/// Output of the forward solver.
#[derive(Debug, Clone)]
pub struct NashSolution {
    pub trajectories: BTreeMap<RobotId, Trajectory>,
    pub costates: BTreeMap<RobotId, CostateTrajectory>,
    /// Per-round max over robots of the input-update max-norm.
    pub residual_history: Vec<f64>,
    /// Per-round, per-robot residuals (same rounds as `residual_history`).
    pub per_robot_residuals: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

/// Hamiltonian `H^t = c^t + f' lambda^{t+1}` of one robot at one time step.
pub fn hamiltonian(
    robot: &RobotProblem,
    t: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    nbr: NeighborStates,
    lambda_next: &DVector<f64>,
) -> f64 {
    let c = robot.cost.value(t, x, u, nbr, robot.weights());
    let f = robot.dynamics.step(x, u, robot.dyn_params());
    c + f.dot(lambda_next)
}

/// Input stationarity residual `dH/du = dc/du + (df/du)' lambda^{t+1}`.
pub fn input_gradient(
    robot: &RobotProblem,
    t: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    nbr: NeighborStates,
    lambda_next: &DVector<f64>,
) -> DVector<f64> {
    let gc = robot.cost.grad_u(t, x, u, nbr, robot.weights());
    let bu = robot.dynamics.jac_u(x, u, robot.dyn_params());
    gc + bu.transpose() * lambda_next
}

/// Input Hessian `d^2 H / du^2` at one time step.
pub fn input_hessian(
    robot: &RobotProblem,
    t: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    lambda_next: &DVector<f64>,
) -> DMatrix<f64> {
    robot.cost.hess_uu(t, robot.input_dim(), robot.weights())
        + robot
            .dynamics
            .vhp_uu(x, u, robot.dyn_params(), lambda_next)
}

fn neighbor_entries<'a>(
    neighbor_x: &'a BTreeMap<RobotId, Vec<DVector<f64>>>,
    t: usize,
) -> Vec<(RobotId, &'a DVector<f64>)> {
    neighbor_x.iter().map(|(j, seq)| (*j, &seq[t])).collect()
}

/// Backward costate rollout: `lambda^T` from the terminal condition, then
/// `lambda^t = dc^t/dx + (df/dx)' lambda^{t+1}` down to `t = 1`.
pub fn backward_costates(
    robot: &RobotProblem,
    x_seq: &[DVector<f64>],
    u_seq: &[DVector<f64>],
    neighbor_x: &BTreeMap<RobotId, Vec<DVector<f64>>>,
    horizon: usize,
) -> Result<CostateTrajectory> {
    let w = robot.weights();
    let p = robot.dyn_params();
    let entries = neighbor_entries(neighbor_x, horizon);
    let mut lam = robot
        .cost
        .terminal_grad_x(horizon, &x_seq[horizon], NeighborStates::new(&entries), w);
    let mut rev = Vec::with_capacity(horizon);
    if lam.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            robot: robot.id,
            t: horizon,
            what: "non-finite terminal costate".into(),
        });
    }
    rev.push(lam.clone());
    for t in (1..horizon).rev() {
        let entries = neighbor_entries(neighbor_x, t);
        let nbr = NeighborStates::new(&entries);
        let gc = robot.cost.grad_x(t, &x_seq[t], nbr, w);
        let ax = robot.dynamics.jac_x(&x_seq[t], &u_seq[t], p);
        lam = gc + ax.transpose() * lam;
        if lam.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                robot: robot.id,
                t,
                what: "non-finite costate".into(),
            });
        }
        rev.push(lam.clone());
    }
    rev.reverse();
    Ok(CostateTrajectory::new(rev))
}

/// One robot's result for a shooting round.
struct RoundLocal {
    costates: CostateTrajectory,
    residual: f64,
    candidate: Vec<DVector<f64>>,
}

fn robot_round(
    game: &GameProblem,
    i: usize,
    u_i: &[DVector<f64>],
    x_i: &[DVector<f64>],
    neighbor_x: &BTreeMap<RobotId, Vec<DVector<f64>>>,
    cfg: &ShootingConfig,
) -> Result<RoundLocal> {
    let robot = &game.robots[i];
    let horizon = game.horizon;
    let costates = backward_costates(robot, x_i, u_i, neighbor_x, horizon)?;

    let mut delta = Vec::with_capacity(horizon);
    let mut residual = 0.0_f64;
    for t in 0..horizon {
        let entries = neighbor_entries(neighbor_x, t);
        let du = input_gradient(
            robot,
            t,
            &x_i[t],
            &u_i[t],
            NeighborStates::new(&entries),
            costates.at(t + 1),
        );
        residual = residual.max(du.amax());
        delta.push(du);
    }

    let step0 = cfg.gamma_for(i);
    let make_candidate = |step: f64| -> Vec<DVector<f64>> {
        u_i.iter()
            .zip(&delta)
            .map(|(u, d)| u - d * step)
            .collect()
    };
    let mut candidate = make_candidate(step0);

    if let Some(bt) = &cfg.backtracking {
        let xi = Trajectory::new(x_i.to_vec(), u_i.to_vec())?;
        let j0 = eval_objective(robot, &xi, neighbor_x, &game.graph, horizon)?;
        let mut step = step0;
        for attempt in 0..=bt.max_steps {
            match rollout(robot, &candidate, horizon) {
                Ok(xc) => {
                    let xic = Trajectory::new(xc, candidate.clone())?;
                    let jc = eval_objective(robot, &xic, neighbor_x, &game.graph, horizon)?;
                    if jc <= j0 + 1e-12 * (1.0 + j0.abs()) {
                        break;
                    }
                }
                Err(e) => {
                    // Unrollable candidate: shrink, or give up at the cap.
                    if attempt == bt.max_steps {
                        return Err(e);
                    }
                }
            }
            if attempt == bt.max_steps {
                break; // keep the smallest-step candidate
            }
            step *= bt.shrink;
            candidate = make_candidate(step);
        }
    }

    Ok(RoundLocal {
        costates,
        residual,
        candidate,
    })
}

/// Distributed shooting-based Nash-equilibrium seeking.
///
/// Per round: roll out states, exchange state sequences with neighbors over
/// the fabric, roll costates backwards, evaluate the input update, and step.
/// Terminates when the largest per-robot update max-norm drops to `eps_u`,
/// or returns `converged = false` at the iteration cap.
pub fn solve_nash(
    game: &GameProblem,
    init_u: &BTreeMap<RobotId, Vec<DVector<f64>>>,
    cfg: &ShootingConfig,
    fabric: &mut Fabric,
) -> Result<NashSolution> {
    let m = game.robot_count();
    if cfg.gamma <= 0.0 || cfg.eps_u <= 0.0 {
        return Err(Error::Config("gamma and eps_u must be positive".into()));
    }
    let mut inputs: Vec<Vec<DVector<f64>>> = Vec::with_capacity(m);
    for robot in &game.robots {
        let u = init_u
            .get(&robot.id)
            .ok_or_else(|| Error::Shape(format!("missing initial inputs for robot {}", robot.id)))?;
        if u.len() != game.horizon || u.iter().any(|v| v.len() != robot.input_dim()) {
            return Err(Error::Shape(format!(
                "initial inputs for robot {} have wrong shape",
                robot.id
            )));
        }
        inputs.push(u.clone());
    }

    let mut residual_history = Vec::new();
    let mut per_robot_residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut final_states: Option<Vec<Vec<DVector<f64>>>> = None;
    let mut final_costates: Option<Vec<CostateTrajectory>> = None;

    for round in 0..cfg.max_iters {
        // Roll out every robot under its current inputs.
        let states: Vec<Vec<DVector<f64>>> = collect_results(map_robots(m, |i| {
            rollout(&game.robots[i], &inputs[i], game.horizon)
        }))?;

        // One exchange per round: full state sequences to every neighbor.
        let neighbor_x = exchange_state_sequences(game, fabric, &states)?;

        // Local backward pass, input update, residual.
        let locals: Vec<RoundLocal> = collect_results(map_robots(m, |i| {
            robot_round(game, i, &inputs[i], &states[i], &neighbor_x[i], cfg)
        }))?;

        let robot_residuals: Vec<f64> = locals.iter().map(|l| l.residual).collect();
        let round_residual = robot_residuals.iter().cloned().fold(0.0_f64, f64::max);
        residual_history.push(round_residual);
        per_robot_residuals.push(robot_residuals);
        iterations = round + 1;

        if round_residual <= cfg.eps_u {
            converged = true;
            final_states = Some(states);
            final_costates = Some(locals.iter().map(|l| l.costates.clone()).collect());
            break;
        }
        for (i, local) in locals.into_iter().enumerate() {
            inputs[i] = local.candidate;
        }
    }

    // The returned states are always the rollout of the returned inputs; when
    // the cap was hit the last update has not been rolled out yet, so do it
    // now (one extra exchange keeps the costates consistent too).
    let (states, costates) = match (final_states, final_costates) {
        (Some(s), Some(c)) => (s, c),
        _ => {
            let states: Vec<Vec<DVector<f64>>> = collect_results(map_robots(m, |i| {
                rollout(&game.robots[i], &inputs[i], game.horizon)
            }))?;
            let neighbor_x = exchange_state_sequences(game, fabric, &states)?;
            let costates: Vec<CostateTrajectory> = collect_results(map_robots(m, |i| {
                backward_costates(
                    &game.robots[i],
                    &states[i],
                    &inputs[i],
                    &neighbor_x[i],
                    game.horizon,
                )
            }))?;
            (states, costates)
        }
    };

    let mut trajectories = BTreeMap::new();
    let mut costate_map = BTreeMap::new();
    for (i, robot) in game.robots.iter().enumerate() {
        trajectories.insert(
            robot.id,
            Trajectory::new(states[i].clone(), inputs[i].clone())?,
        );
        costate_map.insert(robot.id, costates[i].clone());
    }
    Ok(NashSolution {
        trajectories,
        costates: costate_map,
        residual_history,
        per_robot_residuals,
        iterations,
        converged,
    })
}

fn collect_results<T>(items: Vec<Result<T>>) -> Result<Vec<T>> {
    items.into_iter().collect()
}

/// Ship every robot's state sequence to its neighbors; returns per-robot
/// neighbor maps indexed by robot.
fn exchange_state_sequences(
    game: &GameProblem,
    fabric: &mut Fabric,
    states: &[Vec<DVector<f64>>],
) -> Result<Vec<BTreeMap<RobotId, Vec<DVector<f64>>>>> {
    let mut outbound: BTreeMap<RobotId, BTreeMap<RobotId, Vec<DVector<f64>>>> = BTreeMap::new();
    for robot in &game.robots {
        let mut per_target = BTreeMap::new();
        for &j in game.graph.neighbors(robot.id) {
            per_target.insert(j, states[robot.id.0].clone());
        }
        outbound.insert(robot.id, per_target);
    }
    let mut inbound = fabric.exchange(outbound)?;
    let mut result = Vec::with_capacity(game.robot_count());
    for robot in &game.robots {
        result.push(inbound.remove(&robot.id).unwrap_or_default());
    }
    Ok(result)
}

/// Per-robot max over `t` of the input-stationarity max-norm, evaluated on a
/// solution. The dynamics and costate conditions hold by construction of the
/// rollout and backward pass.
pub fn pmp_residual(game: &GameProblem, solution: &NashSolution) -> BTreeMap<RobotId, f64> {
    let mut out = BTreeMap::new();
    for robot in &game.robots {
        let xi = &solution.trajectories[&robot.id];
        let lam = &solution.costates[&robot.id];
        let mut worst = 0.0_f64;
        for t in 0..game.horizon {
            let entries: Vec<(RobotId, &DVector<f64>)> = game
                .graph
                .neighbors(robot.id)
                .iter()
                .map(|j| (*j, &solution.trajectories[j].x[t]))
                .collect();
            let du = input_gradient(
                robot,
                t,
                &xi.x[t],
                &xi.u[t],
                NeighborStates::new(&entries),
                lam.at(t + 1),
            );
            worst = worst.max(du.amax());
        }
        out.insert(robot.id, worst);
    }
    out
}

/// Positive-definiteness of `d^2 H / du^2` at every `(robot, t)`, the
/// sufficiency certificate for the equilibrium.
pub fn check_input_hessian(
    game: &GameProblem,
    solution: &NashSolution,
) -> BTreeMap<RobotId, Vec<bool>> {
    let mut out = BTreeMap::new();
    for robot in &game.robots {
        let xi = &solution.trajectories[&robot.id];
        let lam = &solution.costates[&robot.id];
        let flags: Vec<bool> = (0..game.horizon)
            .map(|t| {
                let h = input_hessian(robot, t, &xi.x[t], &xi.u[t], lam.at(t + 1));
                let sym = (&h + h.transpose()) * 0.5;
                nalgebra::Cholesky::new(sym).is_some()
            })
            .collect();
        out.insert(robot.id, flags);
    }
    out
}
