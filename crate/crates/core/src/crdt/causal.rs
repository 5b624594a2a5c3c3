use std::collections::{BTreeMap, BTreeSet};

use super::clock::VectorClock;
use super::op::Message;
use crate::tree::ReplicaId;

/// Causal delivery buffer shared by every replica flavor.
///
/// Tracks the delivered clock, buffers messages whose causal predecessors are
/// missing, and remembers the latest clock observed from each peer.
#[derive(Clone, Debug)]
pub struct CausalInbox {
    id: ReplicaId,
    replicas: BTreeSet<ReplicaId>,
    clock: VectorClock,
    known: BTreeMap<ReplicaId, VectorClock>,
    pending: Vec<Message>,
}

impl CausalInbox {
    pub fn new(id: ReplicaId, replicas: impl IntoIterator<Item = ReplicaId>) -> Self {
        let mut replicas: BTreeSet<ReplicaId> = replicas.into_iter().collect();
        replicas.insert(id);
        CausalInbox { id, replicas, clock: VectorClock::new(), known: BTreeMap::new(), pending: Vec::new() }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn replicas(&self) -> &BTreeSet<ReplicaId> {
        &self.replicas
    }

    pub fn clock(&self) -> &VectorClock {
        &self.clock
    }

    /// Mutable access for local generation; the caller ticks its own entry.
    pub fn clock_mut(&mut self) -> &mut VectorClock {
        &mut self.clock
    }

    /// Latest clock known from `replica`. For this replica, its own clock.
    pub fn known(&self, replica: ReplicaId) -> VectorClock {
        if replica == self.id {
            self.clock.clone()
        } else {
            self.known.get(&replica).cloned().unwrap_or_default()
        }
    }

    pub fn buffered(&self) -> usize {
        self.pending.len()
    }

    pub fn pending(&self) -> &[Message] {
        &self.pending
    }

    /// True iff every replica is known to have delivered op `(origin, seq)`.
    pub fn observed_by_all(&self, origin: ReplicaId, seq: u64) -> bool {
        self.replicas.iter().all(|&r| {
            if r == self.id {
                self.clock.get(origin) >= seq
            } else {
                self.known.get(&r).is_some_and(|vc| vc.get(origin) >= seq)
            }
        })
    }

    fn is_duplicate(&self, msg: &Message) -> bool {
        match msg {
            Message::Op(op) => op.id.seq <= self.clock.get(op.id.origin),
            Message::Heartbeat(hb) => hb.origin == self.id,
        }
    }

    fn is_ready(&self, msg: &Message) -> bool {
        match msg {
            Message::Op(op) => {
                let o = op.id.origin;
                op.id.seq == self.clock.get(o) + 1 && op.vc.iter().all(|(r, v)| r == o || v <= self.clock.get(r))
            }
            Message::Heartbeat(hb) => hb.vc.le(&self.clock),
        }
    }

    fn observe(&mut self, from: ReplicaId, vc: &VectorClock) {
        if from != self.id {
            self.known.entry(from).or_default().merge(vc);
        }
    }

    /// Accepts a message and returns everything that became deliverable, in
    /// delivery order. Duplicates are dropped. Heartbeats are returned too so
    /// callers can see when a peer clock advanced.
    pub fn receive(&mut self, msg: Message) -> Vec<Message> {
        if self.is_duplicate(&msg) {
            return Vec::new();
        }
        if let Message::Op(op) = &msg {
            if self.pending.iter().any(|m| matches!(m, Message::Op(p) if p.id == op.id)) {
                return Vec::new();
            }
        }
        self.pending.push(msg);
        let mut out = Vec::new();
        while let Some(idx) = self.pending.iter().position(|m| self.is_ready(m)) {
            let msg = self.pending.remove(idx);
            if let Message::Op(op) = &msg {
                self.clock.set(op.id.origin, op.id.seq);
            }
            let (from, vc) = (msg.origin(), msg.vc().clone());
            self.observe(from, &vc);
            out.push(msg);
            // drop anything the delivery turned into a duplicate
            let clock = &self.clock;
            self.pending.retain(|m| match m {
                Message::Op(op) => op.id.seq > clock.get(op.id.origin),
                Message::Heartbeat(_) => true,
            });
        }
        out
    }
}
