//! Simulated message-passing layer over the communication graph.
//!
//! The fabric is bulk-synchronous: within a round every robot computes
//! locally, then all messages are delivered at once through [`Fabric::exchange`],
//! which acts as a full barrier. The fabric enforces that data only travels
//! along graph edges and keeps an audit of all traffic. Payloads are opaque;
//! only their byte size is inspected for accounting.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::graph::{CommGraph, RobotId};
use crate::{Error, Result};

/// Anything that can be shipped through the fabric.
pub trait Payload: Send {
    /// Nominal wire size, used only for audit accounting.
    fn byte_len(&self) -> usize;
}

impl Payload for DVector<f64> {
    fn byte_len(&self) -> usize {
        8 * self.len()
    }
}

impl Payload for DMatrix<f64> {
    fn byte_len(&self) -> usize {
        8 * self.len()
    }
}

impl<T: Payload> Payload for Vec<T> {
    fn byte_len(&self) -> usize {
        self.iter().map(Payload::byte_len).sum()
    }
}

impl Payload for String {
    fn byte_len(&self) -> usize {
        self.len()
    }
}

/// What to do when a robot addresses a non-neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalityMode {
    /// Fail the run immediately.
    Strict,
    /// Drop the message and record the attempt in the audit.
    Permissive,
}

/// One attempted send outside the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub round: usize,
    pub sender: RobotId,
    pub receiver: RobotId,
}

/// One delivered message, for the round-level audit log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditRow {
    pub round: usize,
    pub sender: RobotId,
    pub receiver: RobotId,
    pub bytes: usize,
}

/// Traffic accounting for a run. `violations` must stay empty in any passing run.
#[derive(Debug, Clone, Default)]
pub struct MessageAudit {
    /// Delivered message count per directed (sender, receiver) pair.
    pub counts: BTreeMap<(RobotId, RobotId), u64>,
    /// Total payload bytes per directed (sender, receiver) pair.
    pub bytes: BTreeMap<(RobotId, RobotId), u64>,
    /// Attempted non-neighbor sends.
    pub violations: Vec<Violation>,
    /// Per-message log (one row per delivered message), when enabled.
    pub rows: Vec<AuditRow>,
}

impl MessageAudit {
    pub fn total_messages(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes.values().sum()
    }
}

/// All messages of one synchronous round, keyed by (sender, receiver).
///
/// Every key is validated to be a graph edge before anything is delivered,
/// which gives the barrier semantics: no robot reads before all deliver.
#[derive(Debug)]
pub struct RoundMailbox<T> {
    pub round: usize,
    pub messages: BTreeMap<(RobotId, RobotId), T>,
}

/// Simulated synchronous network over a [`CommGraph`].
#[derive(Debug)]
pub struct Fabric {
    graph: CommGraph,
    mode: LocalityMode,
    round: usize,
    audit: MessageAudit,
    log_rows: bool,
}

impl Fabric {
    /// Strict fabric with full per-message logging.
    pub fn new(graph: CommGraph) -> Self {
        Fabric {
            graph,
            mode: LocalityMode::Strict,
            round: 0,
            audit: MessageAudit::default(),
            log_rows: true,
        }
    }

    pub fn with_mode(mut self, mode: LocalityMode) -> Self {
        self.mode = mode;
        self
    }

    /// Disable the per-message row log (aggregate counters stay on). Long
    /// inverse runs use this to bound memory.
    pub fn with_row_log(mut self, on: bool) -> Self {
        self.log_rows = on;
        self
    }

    pub fn graph(&self) -> &CommGraph {
        &self.graph
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn audit(&self) -> &MessageAudit {
        &self.audit
    }

    pub fn take_audit(&mut self) -> MessageAudit {
        std::mem::take(&mut self.audit)
    }

    /// Deliver one synchronous round of messages.
    ///
    /// `outbound[i][j]` is the payload robot `i` addresses to `j`. The result
    /// maps each receiver to `sender -> payload`. Addressing a non-neighbor is
    /// a fatal error in strict mode and a recorded drop in permissive mode.
    /// Delivery is deterministic: maps are ordered and the round is assembled
    /// in full before any receiver sees a message.
    pub fn exchange<T: Payload>(
        &mut self,
        outbound: BTreeMap<RobotId, BTreeMap<RobotId, T>>,
    ) -> Result<BTreeMap<RobotId, BTreeMap<RobotId, T>>> {
        self.round += 1;
        let mut mailbox = RoundMailbox {
            round: self.round,
            messages: BTreeMap::new(),
        };
        for (sender, targets) in outbound {
            if sender.0 >= self.graph.robot_count() {
                return Err(Error::Topology(format!("unknown sender {sender}")));
            }
            for (receiver, payload) in targets {
                if !self.graph.is_edge(sender, receiver) {
                    match self.mode {
                        LocalityMode::Strict => {
                            return Err(Error::Locality { sender, receiver });
                        }
                        LocalityMode::Permissive => {
                            self.audit.violations.push(Violation {
                                round: self.round,
                                sender,
                                receiver,
                            });
                            continue;
                        }
                    }
                }
                let bytes = payload.byte_len();
                *self.audit.counts.entry((sender, receiver)).or_insert(0) += 1;
                *self.audit.bytes.entry((sender, receiver)).or_insert(0) += bytes as u64;
                if self.log_rows {
                    self.audit.rows.push(AuditRow {
                        round: self.round,
                        sender,
                        receiver,
                        bytes,
                    });
                }
                mailbox.messages.insert((sender, receiver), payload);
            }
        }
        // Barrier: the mailbox is complete; hand every receiver its slice.
        let mut inbound: BTreeMap<RobotId, BTreeMap<RobotId, T>> = BTreeMap::new();
        for ((sender, receiver), payload) in mailbox.messages {
            inbound.entry(receiver).or_default().insert(sender, payload);
        }
        Ok(inbound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line3() -> CommGraph {
        CommGraph::line(3).unwrap()
    }

    fn msg(s: &str) -> String {
        s.to_string()
    }

    #[test]
    fn two_robots_swap_payloads() {
        let mut fabric = Fabric::new(CommGraph::line(2).unwrap());
        let mut outbound = BTreeMap::new();
        outbound.insert(RobotId(0), BTreeMap::from([(RobotId(1), msg("a"))]));
        outbound.insert(RobotId(1), BTreeMap::from([(RobotId(0), msg("b"))]));
        let inbound = fabric.exchange(outbound).unwrap();
        assert_eq!(inbound[&RobotId(1)][&RobotId(0)], "a");
        assert_eq!(inbound[&RobotId(0)][&RobotId(1)], "b");
        assert_eq!(fabric.audit().total_messages(), 2);
        assert_eq!(fabric.audit().total_bytes(), 2);
    }

    #[test]
    fn empty_round_leaves_audit_unchanged() {
        let mut fabric = Fabric::new(line3());
        let inbound = fabric.exchange::<String>(BTreeMap::new()).unwrap();
        assert!(inbound.is_empty());
        assert_eq!(fabric.audit().total_messages(), 0);
        assert!(fabric.audit().rows.is_empty());
    }

    #[test]
    fn non_neighbor_send_is_fatal_in_strict_mode() {
        let mut fabric = Fabric::new(line3());
        let outbound = BTreeMap::from([(
            RobotId(0),
            BTreeMap::from([(RobotId(2), msg("x"))]),
        )]);
        let err = fabric.exchange(outbound).unwrap_err();
        assert!(matches!(
            err,
            Error::Locality {
                sender: RobotId(0),
                receiver: RobotId(2)
            }
        ));
    }

    #[test]
    fn non_neighbor_send_is_recorded_in_permissive_mode() {
        let mut fabric = Fabric::new(line3()).with_mode(LocalityMode::Permissive);
        let outbound = BTreeMap::from([(
            RobotId(0),
            BTreeMap::from([(RobotId(2), msg("x")), (RobotId(1), msg("ok"))]),
        )]);
        let inbound = fabric.exchange(outbound).unwrap();
        assert_eq!(inbound[&RobotId(1)][&RobotId(0)], "ok");
        assert!(!inbound.contains_key(&RobotId(2)));
        assert_eq!(fabric.audit().violations.len(), 1);
        assert_eq!(fabric.audit().violations[0].receiver, RobotId(2));
    }

    #[test]
    fn rounds_increase_monotonically() {
        let mut fabric = Fabric::new(line3());
        let r0 = fabric.round();
        fabric.exchange::<String>(BTreeMap::new()).unwrap();
        let r1 = fabric.round();
        fabric.exchange::<String>(BTreeMap::new()).unwrap();
        let r2 = fabric.round();
        assert!(r0 < r1 && r1 < r2);
    }

    #[test]
    fn exchange_is_deterministic() {
        let run = || {
            let mut fabric = Fabric::new(line3());
            let mut outbound = BTreeMap::new();
            outbound.insert(
                RobotId(1),
                BTreeMap::from([(RobotId(0), msg("p")), (RobotId(2), msg("q"))]),
            );
            outbound.insert(RobotId(2), BTreeMap::from([(RobotId(1), msg("r"))]));
            let inbound = fabric.exchange(outbound).unwrap();
            format!("{inbound:?}")
        };
        assert_eq!(run(), run());
    }
}
