//! Cost models: weighted sums of catalog terms with analytic derivatives.
//!
//! A robot's running cost `c(t, x, u, x_N, theta)` and terminal cost
//! `h(x, x_N, theta)` are linear combinations of catalog terms. Each term
//! either draws its weight from one entry of the robot's theta (the default)
//! or carries a fixed coefficient, which is how a scenario pins the scale
//! gauge of an otherwise scale-invariant objective.
//!
//! All derivatives needed by the costate recursion and the sensitivity
//! assembly are hand-coded here and checked against central differences in
//! the tests.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::graph::RobotId;
use crate::{Error, Result};

/// Smoothing constant (m^2) added to the reciprocal-term denominator so that
/// values and Hessians stay finite at the safety boundary.
pub const RECIPROCAL_SMOOTHING: f64 = 1e-3;

/// Where a term contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Running,
    Terminal,
    Both,
}

/// How a term is weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weight {
    /// The weight is the next unused entry of the robot's theta.
    Theta,
    /// Fixed coefficient, not learnable.
    Fixed(f64),
}

/// Neighbor states at one time step, sorted by robot id.
#[derive(Debug, Clone, Copy)]
pub struct NeighborStates<'a> {
    entries: &'a [(RobotId, &'a DVector<f64>)],
}

impl<'a> NeighborStates<'a> {
    /// `entries` must be sorted by robot id.
    pub fn new(entries: &'a [(RobotId, &'a DVector<f64>)]) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        NeighborStates { entries }
    }

    pub fn empty() -> Self {
        NeighborStates { entries: &[] }
    }

    pub fn get(&self, j: RobotId) -> Option<&'a DVector<f64>> {
        self.entries
            .binary_search_by_key(&j, |e| e.0)
            .ok()
            .map(|k| self.entries[k].1)
    }

    pub fn ids(&self) -> impl Iterator<Item = RobotId> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    fn must(&self, j: RobotId) -> &'a DVector<f64> {
        self.get(j)
            .unwrap_or_else(|| panic!("neighbor state for robot {j} not supplied"))
    }
}

/// One catalog term. See the module docs for the weighting rules.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTerm {
    pub kind: CostTermKind,
    pub stage: Stage,
    pub weight: Weight,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CostTermKind {
    /// Quadratic relative-state error against each listed neighbor:
    /// `sum_j || x_i[range] - x_j[range] - offset_j ||^2`. With the position
    /// slice this is formation keeping by relative position; with a velocity
    /// slice it penalizes relative-velocity error.
    Formation {
        pairs: Vec<(RobotId, DVector<f64>)>,
        /// (start, len) into own state.
        range_self: (usize, usize),
        /// (start, len) into each neighbor state; same len as `range_self`.
        range_nbr: (usize, usize),
    },
    /// Quadratic error on inter-robot distance: `sum_j (||p_i - p_j|| - d_j)^2`.
    FormationDistance {
        pairs: Vec<(RobotId, f64)>,
        pos_len: usize,
    },
    /// Smoothed reciprocal repulsion from disk regions:
    /// `sum_disks 1 / (max(||p - c||^2 - d_safe^2, 0) + eps)`.
    Obstacle {
        disks: Vec<(DVector<f64>, f64)>,
        eps: f64,
        pos_len: usize,
    },
    /// Smoothed reciprocal repulsion between this robot and each listed
    /// neighbor, with per-pair safety distance (sum of the robots' radii).
    Collision {
        pairs: Vec<(RobotId, f64)>,
        eps: f64,
        pos_len: usize,
    },
    /// Sparse quadratic pulls `||p - p_k||^2` active only at the listed time
    /// steps. A point at the horizon contributes to the terminal cost.
    Waypoint {
        points: Vec<(usize, DVector<f64>)>,
        pos_len: usize,
    },
    /// Quadratic input effort `||u - u_ref||^2`.
    Effort { u_ref: DVector<f64> },
    /// Masked quadratic pull to a fixed state: `sum_k mask_k (x_k - target_k)^2`.
    StateTarget {
        target: DVector<f64>,
        mask: DVector<f64>,
    },
}

impl CostTerm {
    pub fn formation(pairs: Vec<(RobotId, DVector<f64>)>, range: (usize, usize)) -> Self {
        CostTerm {
            kind: CostTermKind::Formation {
                pairs,
                range_self: range,
                range_nbr: range,
            },
            stage: Stage::Both,
            weight: Weight::Theta,
        }
    }

    pub fn formation_distance(pairs: Vec<(RobotId, f64)>, pos_len: usize) -> Self {
        CostTerm {
            kind: CostTermKind::FormationDistance { pairs, pos_len },
            stage: Stage::Both,
            weight: Weight::Theta,
        }
    }

    /// `disks`: (center, safety radius). The safety radius must already
    /// include the robot's own radius.
    pub fn obstacle(disks: Vec<(DVector<f64>, f64)>, pos_len: usize) -> Result<Self> {
        for (_, r) in &disks {
            if *r <= 0.0 {
                return Err(Error::Config(format!(
                    "obstacle safety radius must be positive, got {r}"
                )));
            }
        }
        Ok(CostTerm {
            kind: CostTermKind::Obstacle {
                disks,
                eps: RECIPROCAL_SMOOTHING,
                pos_len,
            },
            stage: Stage::Running,
            weight: Weight::Theta,
        })
    }

    /// `pairs`: (neighbor, safety distance = sum of radii).
    pub fn collision(pairs: Vec<(RobotId, f64)>, pos_len: usize) -> Result<Self> {
        for (_, r) in &pairs {
            if *r <= 0.0 {
                return Err(Error::Config(format!(
                    "collision safety distance must be positive, got {r}"
                )));
            }
        }
        Ok(CostTerm {
            kind: CostTermKind::Collision {
                pairs,
                eps: RECIPROCAL_SMOOTHING,
                pos_len,
            },
            stage: Stage::Running,
            weight: Weight::Theta,
        })
    }

    pub fn waypoint(points: Vec<(usize, DVector<f64>)>, pos_len: usize) -> Self {
        CostTerm {
            kind: CostTermKind::Waypoint { points, pos_len },
            stage: Stage::Both,
            weight: Weight::Theta,
        }
    }

    pub fn effort(u_ref: DVector<f64>) -> Self {
        CostTerm {
            kind: CostTermKind::Effort { u_ref },
            stage: Stage::Running,
            weight: Weight::Theta,
        }
    }

    pub fn state_target(target: DVector<f64>, mask: DVector<f64>) -> Self {
        CostTerm {
            kind: CostTermKind::StateTarget { target, mask },
            stage: Stage::Both,
            weight: Weight::Theta,
        }
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    pub fn with_fixed_weight(mut self, w: f64) -> Self {
        self.weight = Weight::Fixed(w);
        self
    }

    fn active_running(&self, t: usize) -> bool {
        match &self.kind {
            CostTermKind::Effort { .. } => true,
            CostTermKind::Waypoint { points, .. } => points.iter().any(|(tk, _)| *tk == t),
            _ => matches!(self.stage, Stage::Running | Stage::Both),
        }
    }

    fn active_terminal(&self, t_terminal: usize) -> bool {
        match &self.kind {
            CostTermKind::Effort { .. } => false,
            CostTermKind::Waypoint { points, .. } => {
                points.iter().any(|(tk, _)| *tk == t_terminal)
            }
            _ => matches!(self.stage, Stage::Terminal | Stage::Both),
        }
    }

    /// Neighbors whose states this term reads.
    pub fn coupled_neighbors(&self) -> Vec<RobotId> {
        match &self.kind {
            CostTermKind::Formation { pairs, .. } => pairs.iter().map(|p| p.0).collect(),
            CostTermKind::FormationDistance { pairs, .. }
            | CostTermKind::Collision { pairs, .. } => pairs.iter().map(|p| p.0).collect(),
            _ => Vec::new(),
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(
            self.kind,
            CostTermKind::Formation { .. }
                | CostTermKind::Waypoint { .. }
                | CostTermKind::Effort { .. }
                | CostTermKind::StateTarget { .. }
        )
    }
}

fn slice(x: &DVector<f64>, range: (usize, usize)) -> DVector<f64> {
    x.rows(range.0, range.1).into_owned()
}

/// Reciprocal barrier value and derivatives in the offset vector `e` (own
/// position minus center/neighbor). Returns (value, d/de, d^2/de^2).
fn reciprocal(e: &DVector<f64>, d_safe: f64, eps: f64) -> (f64, DVector<f64>, DMatrix<f64>) {
    let q = e.norm_squared() - d_safe * d_safe;
    let dim = e.len();
    if q <= 0.0 {
        // Clamped plateau inside the safety region.
        (1.0 / eps, DVector::zeros(dim), DMatrix::zeros(dim, dim))
    } else {
        let den = q + eps;
        let val = 1.0 / den;
        let grad = e * (-2.0 / (den * den));
        let mut hess = e * e.transpose() * (8.0 / (den * den * den));
        for k in 0..dim {
            hess[(k, k)] -= 2.0 / (den * den);
        }
        (val, grad, hess)
    }
}

impl CostTermKind {
    /// Unweighted running value.
    fn value(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, nbr: NeighborStates) -> f64 {
        match self {
            CostTermKind::Formation {
                pairs,
                range_self,
                range_nbr,
            } => pairs
                .iter()
                .map(|(j, off)| {
                    let e = slice(x, *range_self) - slice(nbr.must(*j), *range_nbr) - off;
                    e.norm_squared()
                })
                .sum(),
            CostTermKind::FormationDistance { pairs, pos_len } => pairs
                .iter()
                .map(|(j, d)| {
                    let e = slice(x, (0, *pos_len)) - slice(nbr.must(*j), (0, *pos_len));
                    let rho = e.norm();
                    (rho - d) * (rho - d)
                })
                .sum(),
            CostTermKind::Obstacle {
                disks,
                eps,
                pos_len,
            } => disks
                .iter()
                .map(|(c, d_safe)| {
                    let e = slice(x, (0, *pos_len)) - c;
                    reciprocal(&e, *d_safe, *eps).0
                })
                .sum(),
            CostTermKind::Collision {
                pairs,
                eps,
                pos_len,
            } => pairs
                .iter()
                .map(|(j, d_safe)| {
                    let e = slice(x, (0, *pos_len)) - slice(nbr.must(*j), (0, *pos_len));
                    reciprocal(&e, *d_safe, *eps).0
                })
                .sum(),
            CostTermKind::Waypoint { points, pos_len } => points
                .iter()
                .filter(|(tk, _)| *tk == t)
                .map(|(_, pk)| (slice(x, (0, *pos_len)) - pk).norm_squared())
                .sum(),
            CostTermKind::Effort { u_ref } => (u - u_ref).norm_squared(),
            CostTermKind::StateTarget { target, mask } => {
                let d = x - target;
                d.iter()
                    .zip(mask.iter())
                    .map(|(dk, mk)| mk * dk * dk)
                    .sum()
            }
        }
    }

    fn add_grad_x(
        &self,
        t: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
        scale: f64,
        out: &mut DVector<f64>,
    ) {
        match self {
            CostTermKind::Formation {
                pairs,
                range_self,
                range_nbr,
            } => {
                for (j, off) in pairs {
                    let e = slice(x, *range_self) - slice(nbr.must(*j), *range_nbr) - off;
                    for k in 0..range_self.1 {
                        out[range_self.0 + k] += scale * 2.0 * e[k];
                    }
                }
            }
            CostTermKind::FormationDistance { pairs, pos_len } => {
                for (j, d) in pairs {
                    let e = slice(x, (0, *pos_len)) - slice(nbr.must(*j), (0, *pos_len));
                    let rho = e.norm();
                    let g = e * (2.0 * (rho - d) / rho);
                    for k in 0..*pos_len {
                        out[k] += scale * g[k];
                    }
                }
            }
            CostTermKind::Obstacle {
                disks,
                eps,
                pos_len,
            } => {
                for (c, d_safe) in disks {
                    let e = slice(x, (0, *pos_len)) - c;
                    let (_, g, _) = reciprocal(&e, *d_safe, *eps);
                    for k in 0..*pos_len {
                        out[k] += scale * g[k];
                    }
                }
            }
            CostTermKind::Collision {
                pairs,
                eps,
                pos_len,
            } => {
                for (j, d_safe) in pairs {
                    let e = slice(x, (0, *pos_len)) - slice(nbr.must(*j), (0, *pos_len));
                    let (_, g, _) = reciprocal(&e, *d_safe, *eps);
                    for k in 0..*pos_len {
                        out[k] += scale * g[k];
                    }
                }
            }
            CostTermKind::Waypoint { points, pos_len } => {
                for (_, pk) in points.iter().filter(|(tk, _)| *tk == t) {
                    let e = slice(x, (0, *pos_len)) - pk;
                    for k in 0..*pos_len {
                        out[k] += scale * 2.0 * e[k];
                    }
                }
            }
            CostTermKind::Effort { .. } => {}
            CostTermKind::StateTarget { target, mask } => {
                for k in 0..x.len() {
                    out[k] += scale * 2.0 * mask[k] * (x[k] - target[k]);
                }
            }
        }
    }

    fn add_grad_u(&self, u: &DVector<f64>, scale: f64, out: &mut DVector<f64>) {
        if let CostTermKind::Effort { u_ref } = self {
            for k in 0..u.len() {
                out[k] += scale * 2.0 * (u[k] - u_ref[k]);
            }
        }
    }

    fn add_grad_nbr(
        &self,
        x: &DVector<f64>,
        nbr: NeighborStates,
        j: RobotId,
        scale: f64,
        out: &mut DVector<f64>,
    ) {
        match self {
            CostTermKind::Formation {
                pairs,
                range_self,
                range_nbr,
            } => {
                for (jj, off) in pairs.iter().filter(|(jj, _)| *jj == j) {
                    let e = slice(x, *range_self) - slice(nbr.must(*jj), *range_nbr) - off;
                    for k in 0..range_nbr.1 {
                        out[range_nbr.0 + k] -= scale * 2.0 * e[k];
                    }
                }
            }
            CostTermKind::FormationDistance { pairs, pos_len } => {
                for (jj, d) in pairs.iter().filter(|(jj, _)| *jj == j) {
                    let e = slice(x, (0, *pos_len)) - slice(nbr.must(*jj), (0, *pos_len));
                    let rho = e.norm();
                    let g = e * (2.0 * (rho - d) / rho);
                    for k in 0..*pos_len {
                        out[k] -= scale * g[k];
                    }
                }
            }
            CostTermKind::Collision {
                pairs,
                eps,
                pos_len,
            } => {
                for (jj, d_safe) in pairs.iter().filter(|(jj, _)| *jj == j) {
                    let e = slice(x, (0, *pos_len)) - slice(nbr.must(*jj), (0, *pos_len));
                    let (_, g, _) = reciprocal(&e, *d_safe, *eps);
                    for k in 0..*pos_len {
                        out[k] -= scale * g[k];
                    }
                }
            }
            _ => {}
        }
    }

    fn add_hess_xx(
        &self,
        t: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
        scale: f64,
        out: &mut DMatrix<f64>,
    ) {
        match self {
            CostTermKind::Formation {
                pairs, range_self, ..
            } => {
                for _ in pairs {
                    for k in 0..range_self.1 {
                        out[(range_self.0 + k, range_self.0 + k)] += scale * 2.0;
                    }
                }
            }
            CostTermKind::FormationDistance { pairs, pos_len } => {
                for (j, d) in pairs {
                    let e = slice(x, (0, *pos_len)) - slice(nbr.must(*j), (0, *pos_len));
                    let rho = e.norm();
                    let h = hess_distance(&e, rho, *d);
                    for r in 0..*pos_len {
                        for c in 0..*pos_len {
                            out[(r, c)] += scale * h[(r, c)];
                        }
                    }
                }
            }
            CostTermKind::Obstacle {
                disks,
                eps,
                pos_len,
            } => {
                for (c0, d_safe) in disks {
                    let e = slice(x, (0, *pos_len)) - c0;
                    let (_, _, h) = reciprocal(&e, *d_safe, *eps);
                    for r in 0..*pos_len {
                        for c in 0..*pos_len {
                            out[(r, c)] += scale * h[(r, c)];
                        }
                    }
                }
            }
            CostTermKind::Collision {
                pairs,
                eps,
                pos_len,
            } => {
                for (j, d_safe) in pairs {
                    let e = slice(x, (0, *pos_len)) - slice(nbr.must(*j), (0, *pos_len));
                    let (_, _, h) = reciprocal(&e, *d_safe, *eps);
                    for r in 0..*pos_len {
                        for c in 0..*pos_len {
                            out[(r, c)] += scale * h[(r, c)];
                        }
                    }
                }
            }
            CostTermKind::Waypoint { points, pos_len } => {
                for _ in points.iter().filter(|(tk, _)| *tk == t) {
                    for k in 0..*pos_len {
                        out[(k, k)] += scale * 2.0;
                    }
                }
            }
            CostTermKind::Effort { .. } => {}
            CostTermKind::StateTarget { mask, .. } => {
                for k in 0..x.len() {
                    out[(k, k)] += scale * 2.0 * mask[k];
                }
            }
        }
    }

    fn add_hess_uu(&self, u_len: usize, scale: f64, out: &mut DMatrix<f64>) {
        if let CostTermKind::Effort { .. } = self {
            for k in 0..u_len {
                out[(k, k)] += scale * 2.0;
            }
        }
    }

    fn add_hess_x_nbr(
        &self,
        x: &DVector<f64>,
        nbr: NeighborStates,
        j: RobotId,
        scale: f64,
        out: &mut DMatrix<f64>,
    ) {
        match self {
            CostTermKind::Formation {
                pairs,
                range_self,
                range_nbr,
            } => {
                for _ in pairs.iter().filter(|(jj, _)| *jj == j) {
                    for k in 0..range_self.1 {
                        out[(range_self.0 + k, range_nbr.0 + k)] -= scale * 2.0;
                    }
                }
            }
            CostTermKind::FormationDistance { pairs, pos_len } => {
                for (jj, d) in pairs.iter().filter(|(jj, _)| *jj == j) {
                    let e = slice(x, (0, *pos_len)) - slice(nbr.must(*jj), (0, *pos_len));
                    let rho = e.norm();
                    let h = hess_distance(&e, rho, *d);
                    for r in 0..*pos_len {
                        for c in 0..*pos_len {
                            out[(r, c)] -= scale * h[(r, c)];
                        }
                    }
                }
            }
            CostTermKind::Collision {
                pairs,
                eps,
                pos_len,
            } => {
                for (jj, d_safe) in pairs.iter().filter(|(jj, _)| *jj == j) {
                    let e = slice(x, (0, *pos_len)) - slice(nbr.must(*jj), (0, *pos_len));
                    let (_, _, h) = reciprocal(&e, *d_safe, *eps);
                    for r in 0..*pos_len {
                        for c in 0..*pos_len {
                            out[(r, c)] -= scale * h[(r, c)];
                        }
                    }
                }
            }
            _ => {}
        }
    }
}

/// Hessian of `(||e|| - d)^2` in `e`.
fn hess_distance(e: &DVector<f64>, rho: f64, d: f64) -> DMatrix<f64> {
    let dim = e.len();
    let mut h = e * e.transpose() * (2.0 * d / (rho * rho * rho));
    let diag = 2.0 * (1.0 - d / rho);
    for k in 0..dim {
        h[(k, k)] += diag;
    }
    h
}

/// Weighted sum of catalog terms for one robot.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    terms: Vec<CostTerm>,
    /// Theta slot per term (None for fixed-weight terms).
    slots: Vec<Option<usize>>,
    weight_count: usize,
}

impl CostModel {
    pub fn new(terms: Vec<CostTerm>) -> Self {
        let mut slots = Vec::with_capacity(terms.len());
        let mut next = 0;
        for term in &terms {
            match term.weight {
                Weight::Theta => {
                    slots.push(Some(next));
                    next += 1;
                }
                Weight::Fixed(_) => slots.push(None),
            }
        }
        CostModel {
            terms,
            slots,
            weight_count: next,
        }
    }

    pub fn terms(&self) -> &[CostTerm] {
        &self.terms
    }

    /// How many entries of theta this model consumes.
    pub fn weight_count(&self) -> usize {
        self.weight_count
    }

    pub fn required_neighbors(&self) -> BTreeSet<RobotId> {
        self.terms
            .iter()
            .flat_map(|t| t.coupled_neighbors())
            .collect()
    }

    pub fn is_quadratic(&self) -> bool {
        self.terms.iter().all(CostTerm::is_quadratic)
    }

    fn weight(&self, idx: usize, w: &[f64]) -> f64 {
        match self.terms[idx].weight {
            Weight::Theta => w[self.slots[idx].unwrap()],
            Weight::Fixed(c) => c,
        }
    }

    // ---- running cost -------------------------------------------------

    pub fn value(
        &self,
        t: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        nbr: NeighborStates,
        w: &[f64],
    ) -> f64 {
        self.terms
            .iter()
            .enumerate()
            .filter(|(_, term)| term.active_running(t))
            .map(|(i, term)| self.weight(i, w) * term.kind.value(t, x, u, nbr))
            .sum()
    }

    pub fn grad_x(
        &self,
        t: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
        w: &[f64],
    ) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        for (i, term) in self.terms.iter().enumerate() {
            if term.active_running(t) {
                term.kind.add_grad_x(t, x, nbr, self.weight(i, w), &mut out);
            }
        }
        out
    }

    /// `x` and `nbr` are accepted so that terms coupling the input to own or
    /// neighbor states slot in uniformly; no catalog term uses them today.
    pub fn grad_u(
        &self,
        t: usize,
        _x: &DVector<f64>,
        u: &DVector<f64>,
        _nbr: NeighborStates,
        w: &[f64],
    ) -> DVector<f64> {
        let mut out = DVector::zeros(u.len());
        for (i, term) in self.terms.iter().enumerate() {
            if term.active_running(t) {
                term.kind.add_grad_u(u, self.weight(i, w), &mut out);
            }
        }
        out
    }

    pub fn grad_nbr(
        &self,
        t: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
        j: RobotId,
        n_j: usize,
        w: &[f64],
    ) -> DVector<f64> {
        let mut out = DVector::zeros(n_j);
        for (i, term) in self.terms.iter().enumerate() {
            if term.active_running(t) {
                term.kind
                    .add_grad_nbr(x, nbr, j, self.weight(i, w), &mut out);
            }
        }
        out
    }

    pub fn hess_xx(
        &self,
        t: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
        w: &[f64],
    ) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.len(), x.len());
        for (i, term) in self.terms.iter().enumerate() {
            if term.active_running(t) {
                term.kind
                    .add_hess_xx(t, x, nbr, self.weight(i, w), &mut out);
            }
        }
        out
    }

    pub fn hess_uu(&self, t: usize, u_len: usize, w: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(u_len, u_len);
        for (i, term) in self.terms.iter().enumerate() {
            if term.active_running(t) {
                term.kind.add_hess_uu(u_len, self.weight(i, w), &mut out);
            }
        }
        out
    }


    /// `d^2 c / du dx`; zero for every catalog term but kept in the interface
    /// so the assembly treats cost and dynamics contributions uniformly.
    pub fn hess_ux(&self, _t: usize, n: usize, u_len: usize, _w: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(u_len, n)
    }

    pub fn hess_x_nbr(
        &self,
        t: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
        j: RobotId,
        n_j: usize,
        w: &[f64],
    ) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.len(), n_j);
        for (i, term) in self.terms.iter().enumerate() {
            if term.active_running(t) {
                term.kind
                    .add_hess_x_nbr(x, nbr, j, self.weight(i, w), &mut out);
            }
        }
        out
    }

    /// `d^2 c / du dx_j`; zero for every catalog term.
    pub fn hess_u_nbr(
        &self,
        _t: usize,
        u_len: usize,
        n_j: usize,
        _w: &[f64],
    ) -> DMatrix<f64> {
        DMatrix::zeros(u_len, n_j)
    }

    /// Unweighted values of the theta-weighted terms (`d c / d w`).
    pub fn term_values(
        &self,
        t: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        nbr: NeighborStates,
    ) -> DVector<f64> {
        let mut out = DVector::zeros(self.weight_count);
        for (i, term) in self.terms.iter().enumerate() {
            if let Some(slot) = self.slots[i] {
                if term.active_running(t) {
                    out[slot] = term.kind.value(t, x, u, nbr);
                }
            }
        }
        out
    }

    /// `d^2 c / dx dw`: column per theta-weighted term.
    pub fn dgrad_x_dw(
        &self,
        t: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
    ) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.len(), self.weight_count);
        for (i, term) in self.terms.iter().enumerate() {
            if let Some(slot) = self.slots[i] {
                if term.active_running(t) {
                    let mut col = DVector::zeros(x.len());
                    term.kind.add_grad_x(t, x, nbr, 1.0, &mut col);
                    out.set_column(slot, &col);
                }
            }
        }
        out
    }

    /// `d^2 c / du dw`: column per theta-weighted term.
    pub fn dgrad_u_dw(&self, t: usize, u: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(u.len(), self.weight_count);
        for (i, term) in self.terms.iter().enumerate() {
            if let Some(slot) = self.slots[i] {
                if term.active_running(t) {
                    let mut col = DVector::zeros(u.len());
                    term.kind.add_grad_u(u, 1.0, &mut col);
                    out.set_column(slot, &col);
                }
            }
        }
        out
    }

    // ---- terminal cost -------------------------------------------------

    pub fn terminal_value(
        &self,
        t_terminal: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
        w: &[f64],
    ) -> f64 {
        let u = DVector::zeros(0);
        self.terms
            .iter()
            .enumerate()
            .filter(|(_, term)| term.active_terminal(t_terminal))
            .map(|(i, term)| self.weight(i, w) * term.kind.value(t_terminal, x, &u, nbr))
            .sum()
    }

    pub fn terminal_grad_x(
        &self,
        t_terminal: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
        w: &[f64],
    ) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        for (i, term) in self.terms.iter().enumerate() {
            if term.active_terminal(t_terminal) {
                term.kind
                    .add_grad_x(t_terminal, x, nbr, self.weight(i, w), &mut out);
            }
        }
        out
    }

    pub fn terminal_hess_xx(
        &self,
        t_terminal: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
        w: &[f64],
    ) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.len(), x.len());
        for (i, term) in self.terms.iter().enumerate() {
            if term.active_terminal(t_terminal) {
                term.kind
                    .add_hess_xx(t_terminal, x, nbr, self.weight(i, w), &mut out);
            }
        }
        out
    }

    pub fn terminal_hess_x_nbr(
        &self,
        t_terminal: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
        j: RobotId,
        n_j: usize,
        w: &[f64],
    ) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.len(), n_j);
        for (i, term) in self.terms.iter().enumerate() {
            if term.active_terminal(t_terminal) {
                term.kind
                    .add_hess_x_nbr(x, nbr, j, self.weight(i, w), &mut out);
            }
        }
        out
    }

    pub fn terminal_term_values(
        &self,
        t_terminal: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
    ) -> DVector<f64> {
        let u = DVector::zeros(0);
        let mut out = DVector::zeros(self.weight_count);
        for (i, term) in self.terms.iter().enumerate() {
            if let Some(slot) = self.slots[i] {
                if term.active_terminal(t_terminal) {
                    out[slot] = term.kind.value(t_terminal, x, &u, nbr);
                }
            }
        }
        out
    }

    pub fn terminal_dgrad_x_dw(
        &self,
        t_terminal: usize,
        x: &DVector<f64>,
        nbr: NeighborStates,
    ) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.len(), self.weight_count);
        for (i, term) in self.terms.iter().enumerate() {
            if let Some(slot) = self.slots[i] {
                if term.active_terminal(t_terminal) {
                    let mut col = DVector::zeros(x.len());
                    term.kind.add_grad_x(t_terminal, x, nbr, 1.0, &mut col);
                    out.set_column(slot, &col);
                }
            }
        }
        out
    }
}

/// Catalog of builtin cost-term constructors with a representative sample of
/// each, used by the derivative sweep tests and the scenario-format docs.
pub fn builtin_cost_terms() -> Vec<(&'static str, CostTerm)> {
    vec![
        (
            "formation",
            CostTerm::formation(
                vec![(RobotId(1), DVector::from_vec(vec![-0.8, 0.0]))],
                (0, 2),
            ),
        ),
        (
            "formation_distance",
            CostTerm::formation_distance(vec![(RobotId(1), 0.8)], 2),
        ),
        (
            "obstacle",
            CostTerm::obstacle(vec![(DVector::from_vec(vec![1.0, 0.5]), 0.4)], 2).unwrap(),
        ),
        (
            "collision",
            CostTerm::collision(vec![(RobotId(1), 0.3)], 2).unwrap(),
        ),
        (
            "waypoint",
            CostTerm::waypoint(vec![(3, DVector::from_vec(vec![0.6, 0.4]))], 2),
        ),
        ("effort", CostTerm::effort(DVector::from_vec(vec![0.2, 0.0]))),
        (
            "state_target",
            CostTerm::state_target(
                DVector::from_vec(vec![2.0, 0.0, 0.0]),
                DVector::from_vec(vec![1.0, 1.0, 0.0]),
            ),
        ),
    ]
}
