//! The Maram replication protocol.
//!
//! Operations are generated at an origin replica against its local state,
//! stamped with a vector clock, and delivered everywhere in causal order.
//! Concurrent moves that could close a cycle are resolved by [`wins`]: up-moves
//! beat down-moves, and among down-moves the higher priority wins. A replica's
//! state always equals [`resolve`] of its delivered log.

mod causal;
mod clock;
pub mod codec;
mod op;
mod replay;
mod replica;
mod resolve;

use thiserror::Error;

use crate::tree::TreeError;

pub use causal::CausalInbox;
pub use clock::{ClockOrdering, VectorClock};
pub use codec::{decode_message, decode_op, encode_message, encode_op, CodecError};
pub use op::{crit_anc_overlap, generate, Heartbeat, Message, OpId, OpKind, OpRequest, Operation, OrderKey, Priority};
pub use replay::{apply_one, undo, Entry, ReplayLog, UndoRecord};
pub use replica::{MaramReplica, OpOutcome};
pub use resolve::{
    check_causally_closed, eligible, resolve, resolve_detailed, resolve_unguarded, suppresses, wins, OpStatus,
    Resolution,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CrdtError {
    #[error("precondition-violated: {0}")]
    Precondition(TreeError),
    #[error("operation {0} is not a move")]
    NotAMove(OpId),
    #[error("operation {0} has not been delivered")]
    Undelivered(OpId),
    #[error("log is not causally closed: missing {missing}")]
    CausalGap { missing: OpId },
    #[error("operation {0} appears twice in the log")]
    DuplicateOp(OpId),
}

/// Compares two vector clocks.
pub fn vc_compare(a: &VectorClock, b: &VectorClock) -> ClockOrdering {
    a.compare(b)
}
