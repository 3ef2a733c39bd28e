//! Game data model: per-robot optimal control problems over a communication
//! graph, trajectories, rollout, and objective evaluation.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::cost::{CostModel, NeighborStates};
use crate::dynamics::DynamicsModel;
use crate::graph::{CommGraph, RobotId};
use crate::{Error, Result};

/// State/input trajectory of one robot: `x` has `T+1` entries, `u` has `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(x: Vec<DVector<f64>>, u: Vec<DVector<f64>>) -> Result<Self> {
        if x.len() != u.len() + 1 {
            return Err(Error::Shape(format!(
                "trajectory needs T+1 states and T inputs, got {} and {}",
                x.len(),
                u.len()
            )));
        }
        for (t, v) in x.iter().enumerate() {
            if v.iter().any(|e| !e.is_finite()) {
                return Err(Error::Shape(format!("non-finite state at t={t}")));
            }
        }
        for (t, v) in u.iter().enumerate() {
            if v.iter().any(|e| !e.is_finite()) {
                return Err(Error::Shape(format!("non-finite input at t={t}")));
            }
        }
        Ok(Trajectory { x, u })
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// Flatten in the canonical coordinate order `x^0..x^T, u^0..u^{T-1}`,
    /// the same order the sensitivity stacks use.
    pub fn flatten(&self) -> DVector<f64> {
        let total: usize =
            self.x.iter().map(DVector::len).sum::<usize>() + self.u.iter().map(DVector::len).sum::<usize>();
        let mut out = DVector::zeros(total);
        let mut at = 0;
        for v in self.x.iter().chain(self.u.iter()) {
            out.rows_mut(at, v.len()).copy_from(v);
            at += v.len();
        }
        out
    }
}

/// One robot's parameterized optimal control problem.
///
/// `theta` is laid out as the cost-term weights (in term order) followed by
/// the dynamics parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotProblem {
    pub id: RobotId,
    pub dynamics: DynamicsModel,
    pub cost: CostModel,
    pub x0: DVector<f64>,
    pub theta: DVector<f64>,
    /// Physical radius, folded into collision safety distances by scenarios.
    pub radius: f64,
}

impl RobotProblem {
    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    /// Total parameter count `r_i`.
    pub fn param_dim(&self) -> usize {
        self.cost.weight_count() + self.dynamics.param_dim()
    }

    /// Cost-weight slice of theta.
    pub fn weights(&self) -> &[f64] {
        &self.theta.as_slice()[..self.cost.weight_count()]
    }

    /// Dynamics-parameter slice of theta.
    pub fn dyn_params(&self) -> &[f64] {
        &self.theta.as_slice()[self.cost.weight_count()..]
    }

    pub fn with_theta(&self, theta: DVector<f64>) -> RobotProblem {
        RobotProblem {
            theta,
            ..self.clone()
        }
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.dynamics.step(x, u, self.dyn_params())
    }
}

/// The dynamic game: a communication graph plus one problem per robot.
#[derive(Debug, Clone)]
pub struct GameProblem {
    pub graph: CommGraph,
    pub robots: Vec<RobotProblem>,
    /// Time horizon `T` (number of inputs).
    pub horizon: usize,
    /// Integration step; informational at this level, the dynamics models
    /// already carry it internally.
    pub dt: f64,
}

/// Column layout of the stacked global parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaLayout {
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl ThetaLayout {
    pub fn range(&self, i: RobotId) -> std::ops::Range<usize> {
        let start = self.offsets[i.0];
        let end = self
            .offsets
            .get(i.0 + 1)
            .copied()
            .unwrap_or(self.total);
        start..end
    }
}

impl GameProblem {
    pub fn new(
        graph: CommGraph,
        robots: Vec<RobotProblem>,
        horizon: usize,
        dt: f64,
    ) -> Result<Self> {
        let game = GameProblem {
            graph,
            robots,
            horizon,
            dt,
        };
        game.validate()?;
        Ok(game)
    }

    fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.robots.len() != self.graph.robot_count() {
            return Err(Error::Config(format!(
                "{} robots but graph has {}",
                self.robots.len(),
                self.graph.robot_count()
            )));
        }
        for (idx, robot) in self.robots.iter().enumerate() {
            if robot.id.0 != idx {
                return Err(Error::Config(format!(
                    "robot ids must be 0..m in order, found {} at {idx}",
                    robot.id
                )));
            }
            if robot.param_dim() < 1 {
                return Err(Error::Config(format!(
                    "robot {idx} has no parameters (r_i >= 1 required)"
                )));
            }
            if robot.theta.len() != robot.param_dim() {
                return Err(Error::Config(format!(
                    "robot {idx}: theta has {} entries, expected {}",
                    robot.theta.len(),
                    robot.param_dim()
                )));
            }
            if robot.x0.len() != robot.state_dim() {
                return Err(Error::Config(format!(
                    "robot {idx}: x0 has {} entries, expected {}",
                    robot.x0.len(),
                    robot.state_dim()
                )));
            }
            if robot.x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("robot {idx}: x0 is not finite")));
            }
            let neighbors = self.graph.neighbors(robot.id);
            for j in robot.cost.required_neighbors() {
                if !neighbors.contains(&j) {
                    return Err(Error::Topology(format!(
                        "robot {idx} cost couples to {j}, which is not a neighbor"
                    )));
                }
            }
            for term in robot.cost.terms() {
                if let crate::cost::CostTermKind::Waypoint { points, .. } = &term.kind {
                    for (tk, _) in points {
                        if *tk > self.horizon {
                            return Err(Error::Config(format!(
                                "robot {idx}: waypoint at t={tk} is past the horizon {}",
                                self.horizon
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn robot(&self, i: RobotId) -> &RobotProblem {
        &self.robots[i.0]
    }

    pub fn robot_count(&self) -> usize {
        self.robots.len()
    }

    /// Column layout of `Theta = col(theta_1, ..., theta_m)`.
    pub fn theta_layout(&self) -> ThetaLayout {
        let mut offsets = Vec::with_capacity(self.robots.len());
        let mut at = 0;
        for robot in &self.robots {
            offsets.push(at);
            at += robot.param_dim();
        }
        ThetaLayout {
            offsets,
            total: at,
        }
    }

    pub fn stacked_theta(&self) -> DVector<f64> {
        let layout = self.theta_layout();
        let mut out = DVector::zeros(layout.total);
        for robot in &self.robots {
            out.rows_mut(layout.offsets[robot.id.0], robot.param_dim())
                .copy_from(&robot.theta);
        }
        out
    }

    /// Same game with per-robot parameters replaced.
    pub fn with_thetas(&self, thetas: &[DVector<f64>]) -> Result<GameProblem> {
        if thetas.len() != self.robots.len() {
            return Err(Error::Shape("one theta per robot required".into()));
        }
        let robots = self
            .robots
            .iter()
            .zip(thetas)
            .map(|(r, th)| r.with_theta(th.clone()))
            .collect();
        GameProblem::new(self.graph.clone(), robots, self.horizon, self.dt)
    }

    /// All-zero input sequences, the default shooting initialization.
    pub fn zero_inputs(&self) -> BTreeMap<RobotId, Vec<DVector<f64>>> {
        self.robots
            .iter()
            .map(|r| {
                (
                    r.id,
                    vec![DVector::zeros(r.input_dim()); self.horizon],
                )
            })
            .collect()
    }
}

/// Roll the dynamics forward from `x0` under the input sequence.
pub fn rollout(robot: &RobotProblem, u: &[DVector<f64>], horizon: usize) -> Result<Vec<DVector<f64>>> {
    if u.len() != horizon {
        return Err(Error::Shape(format!(
            "rollout needs {horizon} inputs, got {}",
            u.len()
        )));
    }
    let mut x = Vec::with_capacity(horizon + 1);
    x.push(robot.x0.clone());
    for t in 0..horizon {
        if u[t].len() != robot.input_dim() {
            return Err(Error::Shape(format!(
                "input at t={t} has {} entries, expected {}",
                u[t].len(),
                robot.input_dim()
            )));
        }
        let next = robot.step(&x[t], &u[t]);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                robot: robot.id,
                t: t + 1,
                what: "state left the finite range during rollout".into(),
            });
        }
        x.push(next);
    }
    Ok(x)
}

/// Check that `neighbor_x` covers exactly the graph neighbors `expected`.
fn check_neighbor_cover(
    robot: RobotId,
    neighbor_x: &BTreeMap<RobotId, Vec<DVector<f64>>>,
    expected: &[RobotId],
) -> Result<()> {
    let provided: Vec<RobotId> = neighbor_x.keys().copied().collect();
    if provided != expected {
        return Err(Error::Topology(format!(
            "robot {robot}: neighbor states cover {provided:?}, expected {expected:?}"
        )));
    }
    Ok(())
}

/// Total objective `J_i`: running costs summed over `t = 0..T-1` plus the
/// terminal cost, with neighbor trajectories supplied externally.
pub fn eval_objective(
    robot: &RobotProblem,
    xi: &Trajectory,
    neighbor_x: &BTreeMap<RobotId, Vec<DVector<f64>>>,
    graph: &CommGraph,
    horizon: usize,
) -> Result<f64> {
    check_neighbor_cover(robot.id, neighbor_x, graph.neighbors(robot.id))?;
    if xi.horizon() != horizon {
        return Err(Error::Shape(format!(
            "trajectory horizon {} does not match game horizon {horizon}",
            xi.horizon()
        )));
    }
    for (j, seq) in neighbor_x {
        if seq.len() != horizon + 1 {
            return Err(Error::Shape(format!(
                "neighbor {j} sequence has {} states, expected {}",
                seq.len(),
                horizon + 1
            )));
        }
    }
    let w = robot.weights();
    let mut total = 0.0;
    let mut entries: Vec<(RobotId, &DVector<f64>)> = Vec::with_capacity(neighbor_x.len());
    for t in 0..horizon {
        entries.clear();
        entries.extend(neighbor_x.iter().map(|(j, seq)| (*j, &seq[t])));
        let nbr = NeighborStates::new(&entries);
        total += robot.cost.value(t, &xi.x[t], &xi.u[t], nbr, w);
    }
    entries.clear();
    entries.extend(neighbor_x.iter().map(|(j, seq)| (*j, &seq[horizon])));
    let nbr = NeighborStates::new(&entries);
    total += robot.cost.terminal_value(horizon, &xi.x[horizon], nbr, w);
    Ok(total)
}
