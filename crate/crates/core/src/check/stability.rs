//! Precondition stability: which concurrent operations can invalidate each
//! other's preconditions.
//!
//! For every pair of requests valid on a tree, the second one's effect is
//! applied and the first one's precondition re-checked. Adds must stay valid
//! because generated ids are unique; removes leave tombstones, so nothing
//! depends on a node vanishing. The only pair that may break is move/move, and
//! then the two moves must overlap on critical ancestors, which is exactly what
//! the conflict policy looks at.

use std::collections::{BTreeMap, BTreeSet};

use super::{shapes, valid_requests, CheckReport};
use crate::crdt::{apply_one, crit_anc_overlap, generate, OpKind, OpRequest, Operation, VectorClock};
use crate::tree::{NodeId, TreeState};

fn still_valid(state: &TreeState, op: &Operation) -> bool {
    match op.kind {
        OpKind::Add { node, parent } => state.check_add(node, parent).is_ok(),
        OpKind::Remove { node } => state.check_remove(node).is_ok(),
        OpKind::Move { node, new_parent, .. } => state.check_move(node, new_parent).is_ok(),
    }
}

fn gen(origin: u32, state: &TreeState, prefix_clock: &VectorClock, req: OpRequest) -> Operation {
    generate(origin, &mut prefix_clock.clone(), state, req).expect("valid request")
}

pub fn check_stability(max_nodes: usize) -> CheckReport {
    let mut report = CheckReport::new(format!("precondition stability (<= {max_nodes} nodes)"));
    // (kind1, kind2) -> (pairs, broken)
    let mut cells: BTreeMap<(&str, &str), (u64, u64)> = BTreeMap::new();
    let mut add_ids: BTreeSet<NodeId> = BTreeSet::new();
    for shape in shapes(max_nodes, 2) {
        let mut clock = VectorClock::new();
        for op in &shape.prefix {
            clock.merge(&op.vc);
        }
        let requests = valid_requests(&shape.state);
        for &r1 in &requests {
            let op1 = gen(0, &shape.state, &clock, r1);
            for &r2 in &requests {
                let op2 = gen(1, &shape.state, &clock, r2);
                report.cases += 1;
                if let (OpKind::Add { node: a, .. }, OpKind::Add { node: b, .. }) = (&op1.kind, &op2.kind) {
                    if a == b || shape.state.contains(*a) {
                        report.fail(|| format!("concurrent adds share id {a}"));
                    }
                }
                let mut after = shape.state.clone();
                apply_one(&mut after, &op2);
                let broken = !still_valid(&after, &op1);
                let cell = cells.entry((op1.kind_name(), op2.kind_name())).or_default();
                cell.0 += 1;
                if broken {
                    cell.1 += 1;
                    let explained = op1.is_move() && op2.is_move() && crit_anc_overlap(&op1, &op2).unwrap_or(false);
                    if !explained {
                        report.fail(|| format!("start:\n{}{:?} breaks {:?}", shape.state.render(), op2.kind, op1.kind));
                    }
                }
            }
            if let OpKind::Add { node, .. } = op1.kind {
                add_ids.insert(node);
            }
        }
        // removes never erase: a tombstoned node keeps its parent and stays a target
        for &n in &shape.nodes {
            if shape.state.is_tombstoned(n) {
                report.cases += 1;
                if shape.state.parent_of(n).is_none() || shape.state.check_add(NodeId::new(7, 1), n).is_err() {
                    report.fail(|| format!("tombstoned {n} lost its place:\n{}", shape.state.render()));
                }
            }
        }
    }
    for ((a, b), (n, broken)) in &cells {
        report.notes.push(format!("{a} vs {b}: {n} pairs, {broken} broken"));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_overlapping_moves_break() {
        let r = check_stability(4);
        assert!(r.passed(), "{r}");
        let mm = r.notes.iter().find(|n| n.starts_with("move vs move")).unwrap();
        // the a-b swap on two siblings is in range, so some pair does break
        assert!(!mm.ends_with(" 0 broken"), "{mm}");
        for n in r.notes.iter().filter(|n| !n.starts_with("move vs move")) {
            assert!(n.ends_with(" 0 broken"), "{n}");
        }
    }
}
