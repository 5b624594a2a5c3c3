//! Canonical, from-scratch semantics of a delivered log.
//!
//! [`resolve`] is the reference the incremental replica is checked against:
//! it recomputes every move's win status over the whole log and replays the
//! log in key order.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::op::{crit_anc_overlap, OpId, OpKind, Operation};
use super::replay::apply_one;
use super::CrdtError;
use crate::tree::{MoveType, NodeId, ReplicaId, TreeState};

/// Whether `other` (concurrent with `op`) prevents `op` from winning.
///
/// - up-move `op`: blocked by a concurrent up-move of the same node with
///   higher priority;
/// - down-move `op`: blocked by any concurrent up-move that overlaps it or
///   moves the same node, and by a concurrent down-move that does so with
///   higher priority.
pub fn suppresses(other: &Operation, op: &Operation) -> bool {
    let (
        OpKind::Move { node, mtype, prio, crit_anc, .. },
        OpKind::Move { node: o_node, mtype: o_mtype, prio: o_prio, crit_anc: o_crit, .. },
    ) = (&op.kind, &other.kind)
    else {
        return false;
    };
    let same_node = node == o_node;
    match mtype {
        MoveType::Up => *o_mtype == MoveType::Up && same_node && o_prio > prio,
        MoveType::Down => {
            let conflict = same_node || (o_crit.contains(node) && crit_anc.contains(o_node));
            conflict && (*o_mtype == MoveType::Up || o_prio > prio)
        }
    }
}

/// Win status of move `op` against the raw set of concurrent moves in `log`.
/// Losing opponents still suppress.
pub fn wins(op: &Operation, log: &[Operation]) -> Result<bool, CrdtError> {
    if !op.is_move() {
        return Err(CrdtError::NotAMove(op.id));
    }
    if !log.iter().any(|o| o.id == op.id) {
        return Err(CrdtError::Undelivered(op.id));
    }
    for o in log {
        if o.is_move() && o.concurrent_with(op) {
            debug_assert!(crit_anc_overlap(o, op).is_ok());
            if suppresses(o, op) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Whether the policy lets `op` take effect given its concurrent set. Up-moves
/// always take effect: among concurrent up-moves of one node the replay order
/// (which is priority order) makes the highest priority one land last.
pub fn eligible(op: &Operation, log: &[Operation]) -> Result<bool, CrdtError> {
    match op.mtype() {
        Some(MoveType::Down) => wins(op, log),
        _ => Ok(true),
    }
}

/// Checks that `log` has unique ids and is closed under happens-before.
pub fn check_causally_closed(log: &[Operation]) -> Result<(), CrdtError> {
    let mut seqs: BTreeMap<ReplicaId, BTreeSet<u64>> = BTreeMap::new();
    let mut ids = HashSet::new();
    for op in log {
        if !ids.insert(op.id) {
            return Err(CrdtError::DuplicateOp(op.id));
        }
        seqs.entry(op.id.origin).or_default().insert(op.id.seq);
    }
    for (origin, s) in &seqs {
        if s.iter().next_back().copied() != Some(s.len() as u64) {
            let missing = (1..).find(|i| !s.contains(i)).unwrap_or(1);
            return Err(CrdtError::CausalGap { missing: OpId { origin: *origin, seq: missing } });
        }
    }
    for op in log {
        for (r, v) in op.vc.iter() {
            let have = seqs.get(&r).map_or(0, |s| s.len() as u64);
            if v > have {
                return Err(CrdtError::CausalGap { missing: OpId { origin: r, seq: have + 1 } });
            }
        }
    }
    Ok(())
}

/// Per-operation result of resolving a log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpStatus {
    Applied,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Resolution {
    pub state: TreeState,
    pub status: BTreeMap<OpId, OpStatus>,
    /// Moves that won the conflict policy but were skipped because applying
    /// them at their position would have broken the tree.
    pub guard_skips: Vec<OpId>,
}

pub fn resolve_detailed(log: &[Operation]) -> Result<Resolution, CrdtError> {
    check_causally_closed(log)?;
    let mut sorted: Vec<(&Operation, bool)> =
        log.iter().map(|op| Ok((op, eligible(op, log)?))).collect::<Result<_, CrdtError>>()?;
    sorted.sort_by_key(|(op, _)| op.key());
    let mut state = TreeState::new();
    let mut status = BTreeMap::new();
    let mut guard_skips = Vec::new();
    for (op, ok) in sorted {
        let applied = ok && apply_one(&mut state, op).0;
        if ok && !applied {
            guard_skips.push(op.id);
        }
        status.insert(op.id, if applied { OpStatus::Applied } else { OpStatus::Skipped });
    }
    Ok(Resolution { state, status, guard_skips })
}

/// Tree state denoted by a causally-closed log.
pub fn resolve(log: &[Operation]) -> Result<TreeState, CrdtError> {
    Ok(resolve_detailed(log)?.state)
}

/// The conflict rules alone, with no structural guard: every node hangs under
/// the target of its causally latest winning move, or its add parent.
///
/// Pairwise overlap detection does not see cycles closed by three or more
/// concurrent moves, so this state can be cyclic; [`resolve`] adds the guard.
pub fn resolve_unguarded(log: &[Operation]) -> Result<TreeState, CrdtError> {
    check_causally_closed(log)?;
    let mut state = TreeState::new();
    let mut adds: Vec<&Operation> = log.iter().filter(|o| matches!(o.kind, OpKind::Add { .. })).collect();
    adds.sort_by_key(|o| o.key());
    for op in adds {
        if let OpKind::Add { node, parent } = op.kind {
            state.insert_unchecked(node, parent);
        }
    }
    for op in log {
        if let OpKind::Remove { node } = op.kind {
            state.tombstone_unchecked(node);
        }
    }
    let mut latest: BTreeMap<NodeId, &Operation> = BTreeMap::new();
    for op in log.iter().filter(|o| o.is_move()) {
        if !wins(op, log)? {
            continue;
        }
        let slot = latest.entry(op.target()).or_insert(op);
        if slot.happened_before(op) {
            *slot = op;
        }
    }
    for (node, op) in latest {
        if let OpKind::Move { new_parent, .. } = op.kind {
            state.set_parent_unchecked(node, new_parent);
        }
    }
    Ok(state)
}
