use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use crate::crdt::{
    apply_one, generate, CausalInbox, CrdtError, Message, OpId, OpRequest, OpStatus, Operation, VectorClock,
};
use crate::replica::Replica;
use crate::tree::{NodeId, ReplicaId, TreeError, TreeState};

pub const GLOBAL_LOCK: &str = "GLOBAL";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LockMode {
    Shared,
    Exclusive,
}

impl LockMode {
    fn compatible(self, other: LockMode) -> bool {
        self == LockMode::Shared && other == LockMode::Shared
    }
}

/// An all-or-nothing request for a set of named locks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LockRequest {
    pub id: u64,
    pub requester: ReplicaId,
    /// Sorted by name, one mode per name.
    pub locks: Vec<(String, LockMode)>,
}

/// Sent back to the requester when all of its locks are held.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grant {
    pub request: u64,
    pub requester: ReplicaId,
    /// Join of the clocks reported by every earlier releaser. The requester
    /// must have delivered this much before validating its move.
    pub clock: VectorClock,
}

#[derive(Clone, Debug)]
enum Held {
    Exclusive,
    Shared(BTreeSet<u64>),
}

/// Central shared/exclusive lock table with FIFO grants.
///
/// A waiting request blocks later requests it conflicts with, so grants are
/// FIFO within each conflict group while unrelated requests can pass.
#[derive(Clone, Debug)]
pub struct LockManager {
    site: ReplicaId,
    held: BTreeMap<String, Held>,
    queue: VecDeque<LockRequest>,
    granted: HashMap<u64, LockRequest>,
    released: VectorClock,
}

pub fn global_locks() -> Vec<(String, LockMode)> {
    vec![(GLOBAL_LOCK.to_string(), LockMode::Exclusive)]
}

/// Shared locks on the critical ancestors of `move(n, p_new)` and an exclusive
/// lock on `n`, in canonical order.
pub fn subtree_locks(state: &TreeState, n: NodeId, p_new: NodeId) -> Result<Vec<(String, LockMode)>, TreeError> {
    let mut locks: BTreeMap<String, LockMode> =
        state.critical_ancestors(n, p_new)?.into_iter().map(|a| (a.to_string(), LockMode::Shared)).collect();
    locks.insert(n.to_string(), LockMode::Exclusive);
    Ok(locks.into_iter().collect())
}

impl LockManager {
    pub fn new(site: ReplicaId) -> Self {
        LockManager {
            site,
            held: BTreeMap::new(),
            queue: VecDeque::new(),
            granted: HashMap::new(),
            released: VectorClock::new(),
        }
    }

    pub fn site(&self) -> ReplicaId {
        self.site
    }

    pub fn waiting(&self) -> usize {
        self.queue.len()
    }

    pub fn holders(&self) -> usize {
        self.granted.len()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.granted.is_empty()
    }

    pub fn request(&mut self, req: LockRequest) -> Vec<Grant> {
        self.queue.push_back(req);
        self.try_grant()
    }

    pub fn release(&mut self, request: u64, clock: &VectorClock) -> Vec<Grant> {
        self.released.merge(clock);
        if let Some(req) = self.granted.remove(&request) {
            for (name, _) in &req.locks {
                let free = match self.held.get_mut(name) {
                    Some(Held::Exclusive) => true,
                    Some(Held::Shared(holders)) => {
                        holders.remove(&request);
                        holders.is_empty()
                    }
                    None => false,
                };
                if free {
                    self.held.remove(name);
                }
            }
        }
        self.try_grant()
    }

    fn fits(&self, name: &str, mode: LockMode) -> bool {
        match self.held.get(name) {
            None => true,
            Some(Held::Exclusive) => false,
            Some(Held::Shared(_)) => mode == LockMode::Shared,
        }
    }

    fn try_grant(&mut self) -> Vec<Grant> {
        let mut grants = Vec::new();
        let mut blocked: Vec<(String, LockMode)> = Vec::new();
        let mut waiting = VecDeque::new();
        while let Some(req) = self.queue.pop_front() {
            let ok = req.locks.iter().all(|(name, mode)| {
                self.fits(name, *mode) && blocked.iter().all(|(b, bm)| b != name || mode.compatible(*bm))
            });
            if ok {
                for (name, mode) in &req.locks {
                    match mode {
                        LockMode::Exclusive => {
                            self.held.insert(name.clone(), Held::Exclusive);
                        }
                        LockMode::Shared => {
                            match self.held.entry(name.clone()).or_insert_with(|| Held::Shared(BTreeSet::new())) {
                                Held::Shared(holders) => {
                                    holders.insert(req.id);
                                }
                                Held::Exclusive => unreachable!("fits() rejected this"),
                            }
                        }
                    }
                }
                grants.push(Grant { request: req.id, requester: req.requester, clock: self.released.clone() });
                self.granted.insert(req.id, req);
            } else {
                blocked.extend(req.locks.iter().cloned());
                waiting.push_back(req);
            }
        }
        self.queue = waiting;
        grants
    }
}

/// Replica used by the lock-based protocols. Moves only reach it after the
/// origin held the right locks, so effectors are applied in delivery order.
/// Any effector whose precondition fails on arrival is counted.
#[derive(Clone, Debug)]
pub struct LockReplica {
    inbox: CausalInbox,
    state: TreeState,
    status: HashMap<OpId, OpStatus>,
    violations: u64,
}

impl LockReplica {
    pub fn new(id: ReplicaId, replicas: impl IntoIterator<Item = ReplicaId>) -> Self {
        LockReplica {
            inbox: CausalInbox::new(id, replicas),
            state: TreeState::new(),
            status: HashMap::new(),
            violations: 0,
        }
    }

    /// Delivered effectors that could not be applied.
    pub fn violations(&self) -> u64 {
        self.violations
    }

    fn apply(&mut self, op: &Operation) {
        let (applied, _) = apply_one(&mut self.state, op);
        if !applied {
            self.violations += 1;
        }
        self.status.insert(op.id, if applied { OpStatus::Applied } else { OpStatus::Skipped });
    }
}

impl Replica for LockReplica {
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
        self.apply(&op);
        Ok(op)
    }

    fn receive(&mut self, msg: Message) -> Vec<OpId> {
        let mut out = Vec::new();
        for m in self.inbox.receive(msg) {
            if let Message::Op(op) = m {
                self.apply(&op);
                out.push(op.id);
            }
        }
        out
    }

    fn take_stabilized(&mut self) -> Vec<OpId> {
        Vec::new()
    }

    fn buffered(&self) -> usize {
        self.inbox.buffered()
    }

    fn delivered(&self) -> usize {
        self.status.len()
    }

    fn is_stable(&self, id: OpId) -> Result<bool, CrdtError> {
        if self.status.contains_key(&id) {
            Ok(true)
        } else {
            Err(CrdtError::Undelivered(id))
        }
    }

    fn status(&self, id: OpId) -> Option<OpStatus> {
        self.status.get(&id).copied()
    }
}
