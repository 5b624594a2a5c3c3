//! Sequential safety: from every small tree, every sequence of valid
//! operations keeps the tree invariant, and the guards accept exactly the
//! operations whose preconditions hold.

use std::collections::{BTreeMap, HashSet, VecDeque};

use super::{shapes, CheckReport};
use crate::crdt::{apply_one, OpId, OpKind, Operation, Priority, VectorClock};
use crate::tree::{MoveType, NodeId, TreeState};

pub const DEFAULT_LENGTH: usize = 4;

/// Origin used for node ids in this suite.
const ORIGIN: u32 = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SeqOp {
    Add(NodeId, NodeId),
    Remove(NodeId),
    Move(NodeId, NodeId),
}

/// `x →* n`: following parent edges from `x` reaches `n` (zero edges allowed).
fn reaches(parents: &BTreeMap<NodeId, NodeId>, x: NodeId, n: NodeId) -> bool {
    let mut cur = x;
    for _ in 0..=parents.len() {
        if cur == n {
            return true;
        }
        match parents.get(&cur) {
            Some(&p) if p != cur => cur = p,
            _ => return false,
        }
    }
    false
}

/// The operation preconditions, written directly against the raw maps.
fn precondition(s: &TreeState, op: SeqOp) -> bool {
    let has = |n: NodeId| s.nodes().contains(&n);
    match op {
        SeqOp::Add(n, p) => !has(n) && has(p),
        SeqOp::Remove(n) => has(n) && n != NodeId::Root,
        SeqOp::Move(n, p) => has(n) && has(p) && n != NodeId::Root && !reaches(s.parents(), p, n),
    }
}

fn apply_checked(s: &mut TreeState, op: SeqOp) -> bool {
    match op {
        SeqOp::Add(n, p) => s.add(n, p).is_ok(),
        SeqOp::Remove(n) => s.remove(n).is_ok(),
        SeqOp::Move(n, p) => s.move_node(n, p).is_ok(),
    }
}

fn postcondition(s: &TreeState, op: SeqOp) -> bool {
    match op {
        SeqOp::Add(n, p) | SeqOp::Move(n, p) => s.parent_of(n) == Some(p),
        SeqOp::Remove(n) => s.is_tombstoned(n),
    }
}

/// A node id not present in any state this suite builds.
const GHOST: NodeId = NodeId::Node { origin: ORIGIN, seq: 999 };

/// Candidate operations at `s`, valid or not: adds of a fresh and of an
/// existing node under every node and a ghost, removes and moves over every
/// node, the root and a ghost.
fn candidates(s: &TreeState) -> Vec<SeqOp> {
    let mut ids: Vec<NodeId> = s.nodes().iter().copied().collect();
    let fresh = NodeId::new(ORIGIN, s.len() as u64);
    let existing = *ids.last().expect("root");
    ids.push(GHOST);
    let mut out = Vec::new();
    for &p in &ids {
        out.push(SeqOp::Add(fresh, p));
        out.push(SeqOp::Add(existing, p));
    }
    for &n in &ids {
        out.push(SeqOp::Remove(n));
        for &p in &ids {
            out.push(SeqOp::Move(n, p));
        }
    }
    out
}

type Key = Vec<(NodeId, NodeId, bool)>;

fn key(s: &TreeState) -> Key {
    s.parents().iter().map(|(&n, &p)| (n, p, s.is_tombstoned(n))).collect()
}

fn relabel(sh: &TreeState) -> TreeState {
    // shapes come with replica-minted ids; rename them into this suite's range
    let ids: Vec<NodeId> = sh.nodes().iter().copied().filter(|n| !n.is_root()).collect();
    let map = |n: NodeId| {
        if n.is_root() {
            n
        } else {
            NodeId::new(ORIGIN, 1 + ids.iter().position(|x| *x == n).expect("known node") as u64)
        }
    };
    let mut out = TreeState::new();
    let mut pending: Vec<NodeId> = ids.clone();
    while !pending.is_empty() {
        pending.retain(|&n| {
            let p = sh.parent_of(n).expect("parent");
            if out.contains(map(p)) {
                out.add(map(n), map(p)).expect("parent exists");
                false
            } else {
                true
            }
        });
    }
    for &t in sh.tombstones() {
        out.remove(map(t)).expect("remove");
    }
    out
}

fn show(path: &[SeqOp], start: &TreeState) -> String {
    format!("start:\n{}ops: {:?}", start.render(), path)
}

/// Breadth-first search over all operation sequences of length at most
/// `max_len` from every tree of at most `max_nodes` nodes (tombstone subsets
/// included). Every candidate operation is checked against the precondition;
/// every accepted one must keep the invariant and establish its effect, and
/// every rejected one must leave the state untouched.
pub fn check_sequential(max_nodes: usize, max_len: usize) -> CheckReport {
    let mut report = CheckReport::new(format!("sequential safety (<= {max_nodes} nodes, <= {max_len} ops)"));
    let mut seen: HashSet<Key> = HashSet::new();
    let mut queue: VecDeque<(TreeState, usize, Vec<SeqOp>, usize)> = VecDeque::new();
    let starts: Vec<TreeState> = shapes(max_nodes, 0).iter().map(|sh| relabel(&sh.state)).collect();
    for (i, s) in starts.iter().enumerate() {
        if seen.insert(key(s)) {
            queue.push_back((s.clone(), 0, Vec::new(), i));
        }
    }
    let (mut states, mut applied) = (0u64, 0u64);
    while let Some((s, depth, path, origin)) = queue.pop_front() {
        states += 1;
        if depth == max_len {
            continue;
        }
        for op in candidates(&s) {
            report.cases += 1;
            let expect = precondition(&s, op);
            let mut t = s.clone();
            let accepted = apply_checked(&mut t, op);
            if accepted != expect {
                report.fail(|| {
                    format!(
                        "{}\nguard {} {op:?}, precondition says {expect}",
                        show(&path, &starts[origin]),
                        if accepted { "accepted" } else { "rejected" }
                    )
                });
                continue;
            }
            if !accepted {
                if t != s {
                    report.fail(|| format!("{}\nrejected {op:?} changed the state", show(&path, &starts[origin])));
                }
                continue;
            }
            applied += 1;
            let inv = t.check_invariant();
            if !inv.all_ok() || !postcondition(&t, op) {
                report.fail(|| format!("{}\nafter {op:?}: {inv}\n{}", show(&path, &starts[origin]), t.render()));
                continue;
            }
            if seen.insert(key(&t)) {
                let mut p = path.clone();
                p.push(op);
                queue.push_back((t, depth + 1, p, origin));
            }
        }
    }
    report.notes.push(format!(
        "{} start trees, {states} distinct reachable states, {applied} valid operations applied",
        starts.len()
    ));
    report
}

fn as_operation(op: SeqOp) -> Operation {
    let kind = match op {
        SeqOp::Add(n, p) => OpKind::Add { node: n, parent: p },
        SeqOp::Remove(n) => OpKind::Remove { node: n },
        SeqOp::Move(n, p) => OpKind::Move {
            node: n,
            new_parent: p,
            mtype: MoveType::Down,
            crit_anc: Default::default(),
            prio: Priority { num: 1, origin: 1 },
        },
    };
    Operation { id: OpId { origin: 1, seq: 1 }, kind, vc: VectorClock::from([0, 1]) }
}

/// The replay guard used by the replicated effectors accepts exactly the
/// operations whose precondition holds, on every small tree.
pub fn check_guards(max_nodes: usize) -> CheckReport {
    let mut report = CheckReport::new(format!("effector guards match preconditions (<= {max_nodes} nodes)"));
    for sh in shapes(max_nodes, 0) {
        let s = relabel(&sh.state);
        for op in candidates(&s) {
            report.cases += 1;
            let mut t = s.clone();
            let (applied, _) = apply_one(&mut t, &as_operation(op));
            if applied != precondition(&s, op) {
                report.fail(|| format!("start:\n{}guard {applied} for {op:?}", s.render()));
            }
        }
    }
    report
}
