//! Key-ordered operation log with undo records.
//!
//! Operations are kept sorted by [`OrderKey`] and the tree state always equals
//! replaying every eligible entry in that order, where each step is applied
//! only if its sequential precondition holds at that point. When an entry is
//! inserted in the middle, or an existing entry changes eligibility, the tail
//! is undone using the stored undo records and redone.

use std::collections::HashMap;

use super::op::{OpId, OpKind, Operation, OrderKey};
use crate::tree::{NodeId, TreeState};

/// How to revert one applied step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UndoRecord {
    /// Step had no effect.
    Nothing,
    /// Step created this node.
    Unadd(NodeId),
    /// Step tombstoned this node (it was live before).
    Untombstone(NodeId),
    /// Step re-parented `node`; `old` was its parent before.
    Reparent { node: NodeId, old: NodeId },
}

/// Applies one operation if its precondition holds in `state`. Never fails:
/// an inapplicable operation is reported as skipped.
pub fn apply_one(state: &mut TreeState, op: &Operation) -> (bool, UndoRecord) {
    match &op.kind {
        OpKind::Add { node, parent } => match state.check_add(*node, *parent) {
            Ok(()) => {
                state.insert_unchecked(*node, *parent);
                (true, UndoRecord::Unadd(*node))
            }
            Err(_) => (false, UndoRecord::Nothing),
        },
        OpKind::Remove { node } => match state.check_remove(*node) {
            Ok(()) => {
                if state.tombstone_unchecked(*node) {
                    (true, UndoRecord::Untombstone(*node))
                } else {
                    (true, UndoRecord::Nothing)
                }
            }
            Err(_) => (false, UndoRecord::Nothing),
        },
        OpKind::Move { node, new_parent, .. } => match state.check_move(*node, *new_parent) {
            Ok(()) => {
                let old = state.set_parent_unchecked(*node, *new_parent).expect("checked node has a parent");
                (true, UndoRecord::Reparent { node: *node, old })
            }
            Err(_) => (false, UndoRecord::Nothing),
        },
    }
}

pub fn undo(state: &mut TreeState, record: UndoRecord) {
    match record {
        UndoRecord::Nothing => {}
        UndoRecord::Unadd(n) => state.delete_unchecked(n),
        UndoRecord::Untombstone(n) => state.untombstone(n),
        UndoRecord::Reparent { node, old } => {
            state.set_parent_unchecked(node, old);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub op: Operation,
    /// Whether the conflict policy lets this entry take effect at all.
    pub eligible: bool,
    /// Whether the entry took effect in the current replay.
    pub applied: bool,
    undo: UndoRecord,
}

#[derive(Clone, Debug, Default)]
pub struct ReplayLog {
    entries: Vec<Entry>,
    keys: HashMap<OpId, OrderKey>,
    state: TreeState,
    redone: u64,
}

impl ReplayLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> &TreeState {
        &self.state
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: OpId) -> bool {
        self.keys.contains_key(&id)
    }

    fn position(&self, key: OrderKey) -> Result<usize, usize> {
        self.entries.binary_search_by_key(&key, |e| e.op.key())
    }

    pub fn get(&self, id: OpId) -> Option<&Entry> {
        let key = self.keys.get(&id)?;
        self.position(*key).ok().map(|i| &self.entries[i])
    }

    /// Total number of steps undone and redone so far.
    pub fn redone(&self) -> u64 {
        self.redone
    }

    /// Inserts `op` (if given) and applies eligibility changes, replaying the
    /// affected suffix. Returns the index from which the log was replayed.
    pub fn update(&mut self, insert: Option<(Operation, bool)>, changes: &[(OpId, bool)]) -> usize {
        let mut from = self.entries.len();
        let insert_at = insert.as_ref().map(|(op, _)| {
            let at = self.position(op.key()).expect_err("operation keys are unique");
            from = from.min(at);
            at
        });
        let mut changed_at = Vec::with_capacity(changes.len());
        for &(id, eligible) in changes {
            let key = self.keys[&id];
            let i = self.position(key).expect("changed entry is in the log");
            if self.entries[i].eligible != eligible {
                changed_at.push((i, eligible));
                from = from.min(i);
            }
        }

        for i in (from..self.entries.len()).rev() {
            self.unapply(i);
        }
        for (i, eligible) in changed_at {
            self.entries[i].eligible = eligible;
        }
        if let (Some((op, eligible)), Some(at)) = (insert, insert_at) {
            self.keys.insert(op.id, op.key());
            self.entries.insert(at, Entry { op, eligible, applied: false, undo: UndoRecord::Nothing });
        }
        self.redone += (self.entries.len() - from).saturating_sub(1) as u64;
        for i in from..self.entries.len() {
            self.step(i);
        }
        from
    }

    fn unapply(&mut self, i: usize) {
        let e = &mut self.entries[i];
        undo(&mut self.state, e.undo);
        e.applied = false;
        e.undo = UndoRecord::Nothing;
    }

    fn step(&mut self, i: usize) {
        let e = &mut self.entries[i];
        if e.eligible {
            let (applied, record) = apply_one(&mut self.state, &e.op);
            e.applied = applied;
            e.undo = record;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crdt::clock::VectorClock;
    use crate::crdt::op::{generate, OpRequest};
    use rand::seq::{IndexedRandom, SliceRandom};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn undo_restores_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut s = TreeState::new();
            let mut clock = VectorClock::new();
            for _ in 0..rng.random_range(0..8) {
                let nodes: Vec<NodeId> = s.nodes().iter().copied().collect();
                let parent = *nodes.choose(&mut rng).unwrap();
                let op = generate(0, &mut clock, &s, OpRequest::Add { parent }).unwrap();
                apply_one(&mut s, &op);
                if rng.random_bool(0.3) {
                    let _ = s.remove(*nodes.choose(&mut rng).unwrap());
                }
            }
            let nodes: Vec<NodeId> = s.nodes().iter().copied().collect();
            let a = *nodes.choose(&mut rng).unwrap();
            let b = *nodes.choose(&mut rng).unwrap();
            let reqs = [
                OpRequest::Add { parent: b },
                OpRequest::Remove { node: a },
                OpRequest::Move { node: a, new_parent: b },
            ];
            for req in reqs {
                // build the op unchecked so invalid ones exercise the skip path
                let mut scratch = VectorClock::new();
                let op = match generate(7, &mut scratch, &s, req) {
                    Ok(op) => op,
                    Err(_) => Operation {
                        id: OpId { origin: 7, seq: 1 },
                        kind: match req {
                            OpRequest::Move { node, new_parent } => OpKind::Move {
                                node,
                                new_parent,
                                mtype: crate::tree::MoveType::Down,
                                crit_anc: Default::default(),
                                prio: crate::crdt::op::Priority { num: 1, origin: 7 },
                            },
                            OpRequest::Remove { node } => OpKind::Remove { node },
                            OpRequest::Add { parent } => OpKind::Add { node: a, parent },
                        },
                        vc: VectorClock::from([0, 0, 0, 0, 0, 0, 0, 1]),
                    },
                };
                let mut t = s.clone();
                let (applied, record) = apply_one(&mut t, &op);
                assert_eq!(applied, s.clone().check_op(&op));
                undo(&mut t, record);
                assert_eq!(t, s);
            }
        }
    }

    impl TreeState {
        fn check_op(&self, op: &Operation) -> bool {
            match &op.kind {
                OpKind::Add { node, parent } => self.check_add(*node, *parent).is_ok(),
                OpKind::Remove { node } => self.check_remove(*node).is_ok(),
                OpKind::Move { node, new_parent, .. } => self.check_move(*node, *new_parent).is_ok(),
            }
        }
    }

    #[test]
    fn cycle_forming_move_is_skipped_at_its_position() {
        let mut s = TreeState::new();
        let mut c0 = VectorClock::new();
        let add_a = generate(0, &mut c0, &s, OpRequest::Add { parent: NodeId::Root }).unwrap();
        apply_one(&mut s, &add_a);
        let a = add_a.target();
        let add_b = generate(0, &mut c0, &s, OpRequest::Add { parent: a }).unwrap();
        apply_one(&mut s, &add_b);
        let b = add_b.target();
        let op = Operation {
            id: OpId { origin: 1, seq: 1 },
            kind: OpKind::Move {
                node: a,
                new_parent: b,
                mtype: crate::tree::MoveType::Down,
                crit_anc: Default::default(),
                prio: crate::crdt::op::Priority { num: 3, origin: 1 },
            },
            vc: VectorClock::from([2, 1]),
        };
        let before = s.clone();
        assert_eq!(apply_one(&mut s, &op), (false, UndoRecord::Nothing));
        assert_eq!(s, before);
    }

    #[test]
    fn out_of_order_inserts_match_sorted_replay() {
        let mut s = TreeState::new();
        let mut ops = Vec::new();
        let mut clocks = [VectorClock::new(), VectorClock::new(), VectorClock::new()];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..30 {
            let r = i % 3;
            let nodes: Vec<NodeId> = s.nodes().iter().copied().collect();
            let parent = *nodes.choose(&mut rng).unwrap();
            let op = generate(r as u32, &mut clocks[r], &s, OpRequest::Add { parent }).unwrap();
            apply_one(&mut s, &op);
            ops.push(op);
        }
        let mut sorted = ops.clone();
        sorted.sort_by_key(|o| o.key());
        let mut expect = TreeState::new();
        for op in &sorted {
            apply_one(&mut expect, op);
        }
        let mut shuffled = ops.clone();
        shuffled.shuffle(&mut rng);
        let mut log = ReplayLog::new();
        for op in shuffled {
            log.update(Some((op, true)), &[]);
        }
        assert_eq!(log.state(), &expect);
        assert!(log.redone() > 0);
    }
}
