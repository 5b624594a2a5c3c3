use std::collections::BTreeSet;

use crate::crdt::{
    generate, CausalInbox, CrdtError, Message, OpId, OpRequest, OpStatus, Operation, ReplayLog, VectorClock,
};
use crate::replica::Replica;
use crate::tree::{ReplicaId, TreeState};

/// Undo-do-redo replica. Every operation is placed in a total order by
/// (clock sum, origin); a late arrival undoes the ops ordered after it,
/// applies, and redoes them. Moves that would form a cycle at their position
/// are skipped. Every operation stays transient until all replicas have seen
/// it.
#[derive(Clone, Debug)]
pub struct UdrReplica {
    inbox: CausalInbox,
    log: ReplayLog,
    transient: BTreeSet<OpId>,
    stabilized: Vec<OpId>,
}

impl UdrReplica {
    pub fn new(id: ReplicaId, replicas: impl IntoIterator<Item = ReplicaId>) -> Self {
        UdrReplica {
            inbox: CausalInbox::new(id, replicas),
            log: ReplayLog::new(),
            transient: BTreeSet::new(),
            stabilized: Vec::new(),
        }
    }

    pub fn replay(&self) -> &ReplayLog {
        &self.log
    }

    /// Delivers one message; returns the ids of operations delivered.
    pub fn udr_deliver(&mut self, msg: Message) -> Vec<OpId> {
        let mut out = Vec::new();
        for m in self.inbox.receive(msg) {
            if let Message::Op(op) = m {
                out.push(op.id);
                self.log.update(Some((op, true)), &[]);
            }
        }
        let inbox = &self.inbox;
        let stabilized = &mut self.stabilized;
        self.transient.retain(|id| {
            let stable = inbox.observed_by_all(id.origin, id.seq);
            if stable {
                stabilized.push(*id);
            }
            !stable
        });
        out
    }
}

impl Replica for UdrReplica {
    fn id(&self) -> ReplicaId {
        self.inbox.id()
    }

    fn state(&self) -> &TreeState {
        self.log.state()
    }

    fn clock(&self) -> &VectorClock {
        self.inbox.clock()
    }

    fn submit(&mut self, request: OpRequest) -> Result<Operation, CrdtError> {
        let id = self.inbox.id();
        let op = generate(id, self.inbox.clock_mut(), self.log.state(), request)?;
        self.log.update(Some((op.clone(), true)), &[]);
        if !self.inbox.observed_by_all(id, op.id.seq) {
            self.transient.insert(op.id);
        }
        Ok(op)
    }

    fn receive(&mut self, msg: Message) -> Vec<OpId> {
        self.udr_deliver(msg)
    }

    fn take_stabilized(&mut self) -> Vec<OpId> {
        std::mem::take(&mut self.stabilized)
    }

    fn buffered(&self) -> usize {
        self.inbox.buffered()
    }

    fn delivered(&self) -> usize {
        self.log.len()
    }

    fn is_stable(&self, id: OpId) -> Result<bool, CrdtError> {
        if !self.log.contains(id) {
            return Err(CrdtError::Undelivered(id));
        }
        Ok(self.inbox.observed_by_all(id.origin, id.seq))
    }

    fn status(&self, id: OpId) -> Option<OpStatus> {
        self.log.get(id).map(|e| if e.applied { OpStatus::Applied } else { OpStatus::Skipped })
    }

    fn work_units(&self) -> u64 {
        self.log.redone()
    }
}
