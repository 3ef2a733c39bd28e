//! Communication topology of the robot team.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Index of a robot in the team. Robots are numbered `0..m`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct RobotId(pub usize);

impl fmt::Display for RobotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Undirected, connected communication graph over `m` robots.
///
/// Every algorithm in the kit may exchange data only along edges of this
/// graph; symmetry (`j ∈ N_i ⇔ i ∈ N_j`) and connectivity are checked on
/// construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    m: usize,
    edges: BTreeSet<(RobotId, RobotId)>,
    neighbors: Vec<Vec<RobotId>>,
}

impl CommGraph {
    /// Build a graph from unordered robot-id pairs.
    pub fn new(m: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if m == 0 {
            return Err(Error::Topology("graph needs at least one robot".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Topology(format!("self-loop on robot {a}")));
            }
            if a >= m || b >= m {
                return Err(Error::Topology(format!(
                    "edge ({a},{b}) references a robot outside 0..{m}"
                )));
            }
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            set.insert((RobotId(lo), RobotId(hi)));
        }
        let mut neighbors = vec![Vec::new(); m];
        for &(a, b) in &set {
            neighbors[a.0].push(b);
            neighbors[b.0].push(a);
        }
        for list in &mut neighbors {
            list.sort();
        }
        let graph = CommGraph {
            m,
            edges: set,
            neighbors,
        };
        if !graph.is_connected() {
            return Err(Error::Topology("graph is not connected".into()));
        }
        Ok(graph)
    }

    /// Fully connected graph on `m` robots.
    pub fn complete(m: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for a in 0..m {
            for b in (a + 1)..m {
                edges.push((a, b));
            }
        }
        CommGraph::new(m, &edges)
    }

    /// Path graph `0 - 1 - ... - m-1`.
    pub fn line(m: usize) -> Result<Self> {
        let edges: Vec<_> = (1..m).map(|i| (i - 1, i)).collect();
        CommGraph::new(m, &edges)
    }

    pub fn robot_count(&self) -> usize {
        self.m
    }

    pub fn robots(&self) -> impl Iterator<Item = RobotId> + '_ {
        (0..self.m).map(RobotId)
    }

    /// Sorted neighbor set `N_i`.
    pub fn neighbors(&self, i: RobotId) -> &[RobotId] {
        &self.neighbors[i.0]
    }

    pub fn is_edge(&self, a: RobotId, b: RobotId) -> bool {
        let key = if a < b { (a, b) } else { (b, a) };
        self.edges.contains(&key)
    }

    pub fn edges(&self) -> impl Iterator<Item = (RobotId, RobotId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.m];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j.0] {
                    seen[j.0] = true;
                    stack.push(j.0);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}
