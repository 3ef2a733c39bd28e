//! Solver kit for multi-robot dynamic games.
//!
//! The kit models a group of robots as a non-cooperative dynamic game: each
//! robot owns a discrete-time optimal control problem whose running and
//! terminal costs may depend on the states of its communication-graph
//! neighbors. Two pipelines are provided:
//!
//! * **Forward**: compute a Nash-equilibrium trajectory for every robot with a
//!   distributed shooting method ([`nash`]), where all inter-robot data flows
//!   through a simulated message-passing fabric ([`fabric`]) that enforces
//!   graph locality.
//! * **Inverse**: recover cost (and dynamics) parameters from demonstrated
//!   equilibrium trajectories by differentiating through the equilibrium — a
//!   linear sensitivity system is assembled per robot ([`sensitivity`]),
//!   solved by a distributed iteration over the same fabric ([`dist_solver`]),
//!   and consumed by a gradient-descent outer loop ([`learning`]).
//!
//! Centralized brute-force reference implementations live in [`oracles`] and
//! are used by the test and verification surfaces only.
//!
//! With the default `parallel` feature, per-robot work inside a communication
//! round runs on rayon; results are bit-identical to sequential execution.

pub mod cost;
pub mod dist_solver;
pub mod dynamics;
pub mod error;
pub mod fabric;
pub mod game;
pub mod graph;
pub mod io;
pub mod learning;
pub mod nash;
pub mod oracles;
pub mod scenario;
pub mod sensitivity;

mod exec;

pub use error::Error;
pub use graph::{CommGraph, RobotId};

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
