//! Pairwise commutation: two operations generated concurrently against the
//! same tree, delivered in either order, must leave equal, valid trees.

use super::{shapes, valid_requests, CheckReport};
use crate::crdt::{apply_one, resolve, suppresses, MaramReplica, Message, Operation};
use crate::tree::{MoveType, TreeState};

/// Which conflict policy the pair is delivered under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Maram,
    /// Mutant: conflicting down-moves are settled by arrival order instead of
    /// priority. Used to show the check has teeth.
    ArrivalOrder,
}

/// Replica ids: 0 and 1 generate the pair, 2 builds the starting tree.
const A: u32 = 0;
const B: u32 = 1;
const BUILDER: u32 = 2;

pub fn check_commute(max_nodes: usize) -> CheckReport {
    check_commute_with(max_nodes, Policy::Maram)
}

pub fn check_commute_with(max_nodes: usize, policy: Policy) -> CheckReport {
    let mut report = CheckReport::new(match policy {
        Policy::Maram => format!("commutativity (<= {max_nodes} nodes)"),
        Policy::ArrivalOrder => format!("commutativity, arrival-order mutant (<= {max_nodes} nodes)"),
    });
    let mut by_cell = std::collections::BTreeMap::<(&str, &str), u64>::new();
    for shape in shapes(max_nodes, BUILDER) {
        let mut base = [A, B].map(|id| MaramReplica::new(id, [A, B, BUILDER]));
        for r in &mut base {
            for op in &shape.prefix {
                r.deliver(Message::Op(op.clone()));
            }
        }
        let requests = valid_requests(&shape.state);
        for &ra in &requests {
            for &rb in &requests {
                let (mut ra_rep, mut rb_rep) = (base[0].clone(), base[1].clone());
                let op_a = ra_rep.generate_op(ra).expect("valid request");
                let op_b = rb_rep.generate_op(rb).expect("valid request");
                report.cases += 1;
                *by_cell.entry((op_a.kind_name(), op_b.kind_name())).or_default() += 1;
                let (ab, ba) = match policy {
                    Policy::Maram => {
                        ra_rep.deliver(Message::Op(op_b.clone()));
                        rb_rep.deliver(Message::Op(op_a.clone()));
                        (ra_rep.replay().state().clone(), rb_rep.replay().state().clone())
                    }
                    Policy::ArrivalOrder => {
                        (arrival_order(&shape.state, &op_a, &op_b), arrival_order(&shape.state, &op_b, &op_a))
                    }
                };
                let mut log = shape.prefix.clone();
                log.extend([op_a.clone(), op_b.clone()]);
                let reference = resolve(&log).expect("closed log");
                let inv = [ab.check_invariant(), ba.check_invariant()];
                let ok = ab == ba && inv.iter().all(|i| i.all_ok()) && (policy != Policy::Maram || ab == reference);
                if !ok {
                    report.fail(|| {
                        format!(
                            "start:\n{}a = {:?}\nb = {:?}\na then b:\n{}b then a:\n{}",
                            shape.state.render(),
                            op_a.kind,
                            op_b.kind,
                            ab.render(),
                            ba.render()
                        )
                    });
                }
            }
        }
    }
    let cells: Vec<String> = by_cell.iter().map(|((a, b), n)| format!("{a}/{b}: {n}")).collect();
    report.notes.push(format!("pairs tested: {}", report.cases));
    report.notes.push(cells.join(", "));
    report
}

/// Applies `first` then `second` to `start`, dropping `second` when both are
/// moves that conflict and at least one is a down-move.
fn arrival_order(start: &TreeState, first: &Operation, second: &Operation) -> TreeState {
    let mut s = start.clone();
    apply_one(&mut s, first);
    let down = first.mtype() == Some(MoveType::Down) || second.mtype() == Some(MoveType::Down);
    let conflict = first.is_move()
        && second.is_move()
        && down
        && (first.target() == second.target() || suppresses(first, second) || suppresses(second, first));
    if !conflict {
        apply_one(&mut s, second);
    }
    s
}
