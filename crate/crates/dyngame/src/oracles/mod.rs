//! Centralized brute-force reference implementations.
//!
//! Everything in this module is used by tests, the acceptance suite, and the
//! `verify` command only. Oracles are deliberately centralized and
//! single-threaded: they never touch the communication fabric, and they favor
//! determinism over speed.

pub mod fd;
