//! Comparison implementations: undo-do-redo over a total order, lock-based
//! moves, and an unsafe last-writer-wins tree.

mod lock;
mod naive;
mod udr;

pub use lock::{global_locks, subtree_locks, Grant, LockManager, LockMode, LockReplica, LockRequest, GLOBAL_LOCK};
pub use naive::{naive_apply, NaiveReplica};
pub use udr::UdrReplica;

/// Applies one operation at its position in the total order, skipping it if
/// its sequential precondition does not hold there.
pub use crate::crdt::apply_one as udr_apply_one;
