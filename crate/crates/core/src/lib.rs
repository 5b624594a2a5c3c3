//! Replicated tree with coordination-free atomic moves.
//!
//! - [`tree`]: sequential tree state, invariant checker, ancestry and rank.
//! - [`crdt`]: the replication protocol, conflict policy and wire codec.
//! - [`baselines`]: undo-do-redo, lock-based and naive comparison replicas.
//! - [`sim`]: deterministic discrete-event simulator and metrics.
//! - [`check`]: exhaustive and randomized property suites.

pub mod baselines;
pub mod check;
pub mod crdt;
pub mod replica;
pub mod sim;
pub mod tree;

pub use replica::Replica;
pub use tree::{AbstractionMode, InvariantReport, MoveType, NodeId, ReplicaId, TreeError, TreeState};
