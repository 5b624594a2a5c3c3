use std::collections::BTreeSet;

use super::causal::CausalInbox;
use super::clock::VectorClock;
use super::op::{generate, Heartbeat, Message, OpId, OpRequest, Operation, OrderKey};
use super::replay::ReplayLog;
use super::resolve::{suppresses, OpStatus};
use super::CrdtError;
use crate::replica::Replica;
use crate::tree::{MoveType, ReplicaId, TreeState};

/// Status of a delivered operation at one replica.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpOutcome {
    pub id: OpId,
    pub status: OpStatus,
    pub stable: bool,
}

/// A Maram replica: causal delivery, the move conflict policy, and stability
/// tracking for its own moves.
///
/// Each delivery only re-evaluates moves concurrent with the arrival; the
/// replay log then undoes and redoes the suffix that changed.
///
/// Adds and removes always take effect, so they are stable at once. A move's
/// outcome depends on every move ordered before it, since a late arrival can
/// suppress one of those and change what the guard sees. It is final once
/// every delivered move up to its key has been delivered everywhere.
#[derive(Clone, Debug)]
pub struct MaramReplica {
    inbox: CausalInbox,
    log: ReplayLog,
    transient: BTreeSet<OpId>,
    stabilized: Vec<OpId>,
    /// Every delivered move with a key up to this one is known everywhere.
    frontier: Option<OrderKey>,
}

impl MaramReplica {
    pub fn new(id: ReplicaId, replicas: impl IntoIterator<Item = ReplicaId>) -> Self {
        MaramReplica {
            inbox: CausalInbox::new(id, replicas),
            log: ReplayLog::new(),
            transient: BTreeSet::new(),
            stabilized: Vec::new(),
            frontier: None,
        }
    }

    pub fn inbox(&self) -> &CausalInbox {
        &self.inbox
    }

    /// Delivered operations in replay (key) order.
    pub fn log(&self) -> Vec<Operation> {
        self.log.entries().iter().map(|e| e.op.clone()).collect()
    }

    pub fn replay(&self) -> &ReplayLog {
        &self.log
    }

    pub fn generate_op(&mut self, request: OpRequest) -> Result<Operation, CrdtError> {
        let id = self.inbox.id();
        let op = generate(id, self.inbox.clock_mut(), self.log.state(), request)?;
        self.apply(op.clone());
        if op.is_move() {
            self.refresh_stability();
            if !self.is_stable(op.id)? {
                self.transient.insert(op.id);
            }
        }
        Ok(op)
    }

    /// Feeds one message through causal delivery. Returns the ids of every
    /// operation delivered as a result.
    pub fn deliver(&mut self, msg: Message) -> Vec<OpId> {
        let mut delivered = Vec::new();
        for m in self.inbox.receive(msg) {
            if let Message::Op(op) = m {
                delivered.push(op.id);
                self.apply(op);
            }
        }
        self.refresh_stability();
        delivered
    }

    fn apply(&mut self, op: Operation) {
        let mut changes = Vec::new();
        let mut eligible = true;
        if op.is_move() {
            for e in self.log.entries() {
                if !e.op.is_move() || !e.op.concurrent_with(&op) {
                    continue;
                }
                if e.eligible && e.op.mtype() == Some(MoveType::Down) && suppresses(&op, &e.op) {
                    changes.push((e.op.id, false));
                }
                if op.mtype() == Some(MoveType::Down) && suppresses(&e.op, &op) {
                    eligible = false;
                }
            }
        }
        self.log.update(Some((op, eligible)), &changes);
    }

    fn refresh_stability(&mut self) {
        let entries = self.log.entries();
        let start = match self.frontier {
            Some(f) => entries.partition_point(|e| e.op.key() <= f),
            None => 0,
        };
        for e in &entries[start..] {
            if !e.op.is_move() {
                continue;
            }
            if !self.inbox.observed_by_all(e.op.id.origin, e.op.id.seq) {
                break;
            }
            self.frontier = Some(e.op.key());
        }
        let Some(f) = self.frontier else { return };
        let log = &self.log;
        let mut done = Vec::new();
        self.transient.retain(|id| {
            let stable = log.get(*id).is_some_and(|e| e.op.key() <= f);
            if stable {
                done.push(*id);
            }
            !stable
        });
        self.stabilized.extend(done);
    }

    pub fn heartbeat(&self) -> Heartbeat {
        Heartbeat { origin: self.inbox.id(), vc: self.inbox.clock().clone() }
    }

    /// Whether the outcome of a delivered operation is final: always for adds
    /// and removes, and for a move once it is behind the stability frontier.
    pub fn is_stable(&self, id: OpId) -> Result<bool, CrdtError> {
        let entry = self.log.get(id).ok_or(CrdtError::Undelivered(id))?;
        Ok(!entry.op.is_move() || self.frontier.is_some_and(|f| entry.op.key() <= f))
    }

    pub fn outcome(&self, id: OpId) -> Result<OpOutcome, CrdtError> {
        let entry = self.log.get(id).ok_or(CrdtError::Undelivered(id))?;
        Ok(OpOutcome {
            id,
            status: if entry.applied { OpStatus::Applied } else { OpStatus::Skipped },
            stable: self.is_stable(id)?,
        })
    }
}

impl Replica for MaramReplica {
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
        self.generate_op(request)
    }

    fn receive(&mut self, msg: Message) -> Vec<OpId> {
        self.deliver(msg)
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
        MaramReplica::is_stable(self, id)
    }

    fn status(&self, id: OpId) -> Option<OpStatus> {
        self.outcome(id).ok().map(|o| o.status)
    }

    fn work_units(&self) -> u64 {
        self.log.redone()
    }
}
