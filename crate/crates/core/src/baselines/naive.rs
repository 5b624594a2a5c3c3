use std::collections::BTreeMap;

use crate::crdt::{
    generate, CausalInbox, CrdtError, Message, OpId, OpKind, OpRequest, OpStatus, Operation, OrderKey, VectorClock,
};
use crate::replica::Replica;
use crate::tree::{NodeId, ReplicaId, TreeState};

/// Last-writer-wins parent pointers with no cycle protection.
///
/// Converges, but concurrent crossing moves leave a detached cycle.
#[derive(Clone, Debug)]
pub struct NaiveReplica {
    inbox: CausalInbox,
    state: TreeState,
    tags: BTreeMap<NodeId, OrderKey>,
    delivered: usize,
}

/// Applies an operation by last-writer-wins on the target's parent.
pub fn naive_apply(state: &mut TreeState, tags: &mut BTreeMap<NodeId, OrderKey>, op: &Operation) {
    let key = op.key();
    match op.kind {
        OpKind::Add { node, parent } => {
            if !state.contains(node) {
                state.insert_unchecked(node, parent);
                tags.insert(node, key);
            }
        }
        OpKind::Remove { node } => {
            if state.contains(node) && !node.is_root() {
                state.tombstone_unchecked(node);
            }
        }
        OpKind::Move { node, new_parent, .. } => {
            if tags.get(&node).is_none_or(|t| *t < key) {
                state.set_parent_unchecked(node, new_parent);
                tags.insert(node, key);
            }
        }
    }
}

impl NaiveReplica {
    pub fn new(id: ReplicaId, replicas: impl IntoIterator<Item = ReplicaId>) -> Self {
        NaiveReplica {
            inbox: CausalInbox::new(id, replicas),
            state: TreeState::new(),
            tags: BTreeMap::new(),
            delivered: 0,
        }
    }

    pub fn naive_deliver(&mut self, msg: Message) -> Vec<OpId> {
        let mut out = Vec::new();
        for m in self.inbox.receive(msg) {
            if let Message::Op(op) = m {
                naive_apply(&mut self.state, &mut self.tags, &op);
                self.delivered += 1;
                out.push(op.id);
            }
        }
        out
    }
}

impl Replica for NaiveReplica {
    fn id(&self) -> ReplicaId {
        self.inbox.id()
    }

    fn state(&self) -> &TreeState {
        &self.state
    }

    fn clock(&self) -> &VectorClock {
        self.inbox.clock()
    }

    fn submit(&mut self, request: OpRequest) -> Result<Operation, CrdtError> {
        let op = generate(self.inbox.id(), self.inbox.clock_mut(), &self.state, request)?;
        naive_apply(&mut self.state, &mut self.tags, &op);
        self.delivered += 1;
        Ok(op)
    }

    fn receive(&mut self, msg: Message) -> Vec<OpId> {
        self.naive_deliver(msg)
    }

    fn take_stabilized(&mut self) -> Vec<OpId> {
        Vec::new()
    }

    fn buffered(&self) -> usize {
        self.inbox.buffered()
    }

    fn delivered(&self) -> usize {
        self.delivered
    }

    fn is_stable(&self, _id: OpId) -> Result<bool, CrdtError> {
        Ok(true)
    }

    fn status(&self, _id: OpId) -> Option<OpStatus> {
        Some(OpStatus::Applied)
    }
}
