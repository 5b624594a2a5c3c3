use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::clock::VectorClock;
use super::CrdtError;
use crate::tree::{MoveType, NodeId, ReplicaId, TreeState};

/// Identity of an operation: its origin replica and the origin's counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpId {
    pub origin: ReplicaId,
    pub seq: u64,
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.origin, self.seq)
    }
}

/// Move priority. Compared by number first, then by origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Priority {
    pub num: u64,
    pub origin: ReplicaId,
}

/// Total order over all operations of a run: clock sum, then origin.
///
/// The clock sum grows strictly along happens-before, so sorting by this key
/// yields a linear extension of the causal order. Move priorities use the same
/// key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OrderKey {
    pub sum: u64,
    pub origin: ReplicaId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add { node: NodeId, parent: NodeId },
    Remove { node: NodeId },
    Move { node: NodeId, new_parent: NodeId, mtype: MoveType, crit_anc: BTreeSet<NodeId>, prio: Priority },
}

/// An effector as shipped between replicas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operation {
    pub id: OpId,
    pub kind: OpKind,
    pub vc: VectorClock,
}

impl Operation {
    pub fn key(&self) -> OrderKey {
        OrderKey { sum: self.vc.sum(), origin: self.id.origin }
    }

    /// The node this operation creates, tombstones or moves.
    pub fn target(&self) -> NodeId {
        match &self.kind {
            OpKind::Add { node, .. } | OpKind::Remove { node } | OpKind::Move { node, .. } => *node,
        }
    }

    pub fn is_move(&self) -> bool {
        matches!(self.kind, OpKind::Move { .. })
    }

    pub fn mtype(&self) -> Option<MoveType> {
        match &self.kind {
            OpKind::Move { mtype, .. } => Some(*mtype),
            _ => None,
        }
    }

    pub fn prio(&self) -> Option<Priority> {
        match &self.kind {
            OpKind::Move { prio, .. } => Some(*prio),
            _ => None,
        }
    }

    pub fn crit_anc(&self) -> Option<&BTreeSet<NodeId>> {
        match &self.kind {
            OpKind::Move { crit_anc, .. } => Some(crit_anc),
            _ => None,
        }
    }

    /// True iff `self` is in the causal past of `other`.
    pub fn happened_before(&self, other: &Operation) -> bool {
        self.id != other.id && other.vc.get(self.id.origin) >= self.id.seq
    }

    pub fn concurrent_with(&self, other: &Operation) -> bool {
        self.id != other.id && !self.happened_before(other) && !other.happened_before(self)
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            OpKind::Add { .. } => "add",
            OpKind::Remove { .. } => "remove",
            OpKind::Move { .. } => "move",
        }
    }
}

/// A no-effect message advertising the sender's clock.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heartbeat {
    pub origin: ReplicaId,
    pub vc: VectorClock,
}

/// Anything a replica sends to its peers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Op(Operation),
    Heartbeat(Heartbeat),
}

impl Message {
    pub fn origin(&self) -> ReplicaId {
        match self {
            Message::Op(op) => op.id.origin,
            Message::Heartbeat(hb) => hb.origin,
        }
    }

    pub fn vc(&self) -> &VectorClock {
        match self {
            Message::Op(op) => &op.vc,
            Message::Heartbeat(hb) => &hb.vc,
        }
    }
}

/// A client request, before it becomes an effector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OpRequest {
    Add { parent: NodeId },
    Remove { node: NodeId },
    Move { node: NodeId, new_parent: NodeId },
}

/// Turns a request into an effector at its origin.
///
/// The request's precondition is checked against `state` first; on rejection
/// the clock is left untouched. For moves the type, critical ancestors and
/// priority are computed here, once, and travel with the operation.
pub fn generate(
    origin: ReplicaId,
    clock: &mut VectorClock,
    state: &TreeState,
    request: OpRequest,
) -> Result<Operation, CrdtError> {
    let seq = clock.get(origin) + 1;
    let kind = match request {
        OpRequest::Add { parent } => {
            let node = NodeId::new(origin, seq);
            state.check_add(node, parent).map_err(CrdtError::Precondition)?;
            OpKind::Add { node, parent }
        }
        OpRequest::Remove { node } => {
            state.check_remove(node).map_err(CrdtError::Precondition)?;
            OpKind::Remove { node }
        }
        OpRequest::Move { node, new_parent } => {
            state.check_move(node, new_parent).map_err(CrdtError::Precondition)?;
            let mtype = state.classify_move(node, new_parent).map_err(CrdtError::Precondition)?;
            let crit_anc = state.critical_ancestors(node, new_parent).map_err(CrdtError::Precondition)?;
            // placeholder priority, fixed up once the clock is stamped
            OpKind::Move { node, new_parent, mtype, crit_anc, prio: Priority { num: 0, origin } }
        }
    };
    clock.tick(origin);
    let vc = clock.clone();
    let mut op = Operation { id: OpId { origin, seq }, kind, vc };
    let key = op.key();
    if let OpKind::Move { prio, .. } = &mut op.kind {
        *prio = Priority { num: key.sum, origin };
    }
    Ok(op)
}

/// Mutual membership of each move's node in the other's shipped
/// critical-ancestor set.
pub fn crit_anc_overlap(op1: &Operation, op2: &Operation) -> Result<bool, CrdtError> {
    let a1 = op1.crit_anc().ok_or(CrdtError::NotAMove(op1.id))?;
    let a2 = op2.crit_anc().ok_or(CrdtError::NotAMove(op2.id))?;
    Ok(a2.contains(&op1.target()) && a1.contains(&op2.target()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TreeError;

    fn siblings() -> (TreeState, NodeId, NodeId) {
        let (a, b) = (NodeId::new(9, 1), NodeId::new(9, 2));
        let mut s = TreeState::new();
        s.add(a, NodeId::Root).unwrap();
        s.add(b, NodeId::Root).unwrap();
        (s, a, b)
    }

    #[test]
    fn sibling_move_is_down_with_destination_as_crit_anc() {
        let (s, a, b) = siblings();
        let mut clock = VectorClock::new();
        let op = generate(0, &mut clock, &s, OpRequest::Move { node: a, new_parent: b }).unwrap();
        assert_eq!(op.mtype(), Some(MoveType::Down));
        assert_eq!(op.crit_anc(), Some(&BTreeSet::from([b])));
        assert_eq!(op.prio(), Some(Priority { num: 1, origin: 0 }));
    }

    #[test]
    fn rejected_request_leaves_clock_alone() {
        let (mut s, a, b) = siblings();
        s.move_node(b, a).unwrap();
        let mut clock = VectorClock::from([3]);
        let err = generate(0, &mut clock, &s, OpRequest::Move { node: a, new_parent: b }).unwrap_err();
        assert_eq!(err, CrdtError::Precondition(TreeError::CycleViolation { node: a, new_parent: b }));
        assert_eq!(clock, VectorClock::from([3]));
    }

    #[test]
    fn sequential_ops_are_causally_ordered() {
        let (s, a, b) = siblings();
        let mut clock = VectorClock::new();
        let first = generate(1, &mut clock, &s, OpRequest::Move { node: a, new_parent: b }).unwrap();
        let second = generate(1, &mut clock, &s, OpRequest::Remove { node: a }).unwrap();
        assert_eq!(first.vc.compare(&second.vc), super::super::ClockOrdering::Less);
        assert_eq!(second.id.seq, first.id.seq + 1);
        assert!(first.happened_before(&second));
        assert!(!first.concurrent_with(&second));
    }

    #[test]
    fn overlap_examples() {
        let (s, a, b) = siblings();
        let x = generate(0, &mut VectorClock::new(), &s, OpRequest::Move { node: a, new_parent: b }).unwrap();
        let y = generate(1, &mut VectorClock::new(), &s, OpRequest::Move { node: b, new_parent: a }).unwrap();
        assert!(crit_anc_overlap(&x, &y).unwrap());

        let mut t = s.clone();
        let (c, d) = (NodeId::new(9, 3), NodeId::new(9, 4));
        t.add(c, a).unwrap();
        t.add(d, b).unwrap();
        let (e, f) = (NodeId::new(9, 5), NodeId::new(9, 6));
        t.add(e, a).unwrap();
        t.add(f, b).unwrap();
        let x = generate(0, &mut VectorClock::new(), &t, OpRequest::Move { node: c, new_parent: e }).unwrap();
        let y = generate(1, &mut VectorClock::new(), &t, OpRequest::Move { node: d, new_parent: f }).unwrap();
        assert!(!crit_anc_overlap(&x, &y).unwrap());

        let add = generate(0, &mut VectorClock::new(), &t, OpRequest::Add { parent: a }).unwrap();
        assert_eq!(crit_anc_overlap(&add, &y), Err(CrdtError::NotAMove(add.id)));
    }
}
