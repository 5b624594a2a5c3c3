//! Common surface of every replica flavor, as driven by the simulator and the
//! fuzz harness.

use crate::crdt::{CrdtError, Heartbeat, Message, OpId, OpRequest, OpStatus, Operation, VectorClock};
use crate::tree::{ReplicaId, TreeState};

pub trait Replica {
    fn id(&self) -> ReplicaId;

    fn state(&self) -> &TreeState;

    fn clock(&self) -> &VectorClock;

    /// Generates an effector for a client request and applies it locally.
    fn submit(&mut self, request: OpRequest) -> Result<Operation, CrdtError>;

    /// Accepts a message from a peer; returns ids of operations delivered.
    fn receive(&mut self, msg: Message) -> Vec<OpId>;

    fn heartbeat(&self) -> Message {
        Message::Heartbeat(Heartbeat { origin: self.id(), vc: self.clock().clone() })
    }

    /// Own operations that were transient and have since become stable.
    fn take_stabilized(&mut self) -> Vec<OpId>;

    fn buffered(&self) -> usize;

    fn delivered(&self) -> usize;

    fn is_stable(&self, id: OpId) -> Result<bool, CrdtError>;

    fn status(&self, id: OpId) -> Option<OpStatus>;

    /// Replay steps spent re-ordering the log, where that applies.
    fn work_units(&self) -> u64 {
        0
    }
}
