//! Exhaustive and randomized property suites.
//!
//! - [`seq`]: sequential safety of the tree operations and their guards.
//! - [`commute`]: pairwise commutation of concurrent effectors.
//! - [`stability`]: which preconditions concurrent operations can break.
//! - [`fuzz`]: random workloads under random causal delivery schedules.

pub mod commute;
pub mod fuzz;
pub mod seq;
pub mod stability;

use std::fmt;

use crate::crdt::{generate, OpRequest, Operation, VectorClock};
use crate::tree::{NodeId, ReplicaId, TreeState};

/// Result of one suite.
#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub name: String,
    /// Number of cases (states, operations or pairs) examined.
    pub cases: u64,
    pub failures: u64,
    /// First few counterexamples, rendered for humans.
    pub counterexamples: Vec<String>,
    /// Extra lines for the summary.
    pub notes: Vec<String>,
}

const KEEP: usize = 5;

impl CheckReport {
    pub fn new(name: impl Into<String>) -> Self {
        CheckReport { name: name.into(), ..Default::default() }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn fail(&mut self, counterexample: impl FnOnce() -> String) {
        self.failures += 1;
        if self.counterexamples.len() < KEEP {
            self.counterexamples.push(counterexample());
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(f, "{verdict} {}: {} cases, {} failures", self.name, self.cases, self.failures)?;
        for n in &self.notes {
            writeln!(f, "  {n}")?;
        }
        for (i, c) in self.counterexamples.iter().enumerate() {
            writeln!(f, "  counterexample {}:", i + 1)?;
            for line in c.lines() {
                writeln!(f, "    {line}")?;
            }
        }
        Ok(())
    }
}

/// Which suites `check` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Seq,
    Commute,
    Stability,
    All,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seq" => Ok(Scope::Seq),
            "commute" => Ok(Scope::Commute),
            "stability" => Ok(Scope::Stability),
            "all" => Ok(Scope::All),
            _ => Err(format!("unknown scope {s:?} (expected seq, commute, stability or all)")),
        }
    }
}

/// Runs the suites in `scope`. `bound` is the node bound (root included) for
/// the exhaustive suites; `None` picks each suite's default.
pub fn run_checks(scope: Scope, bound: Option<usize>) -> Vec<CheckReport> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Seq | Scope::All) {
        out.push(seq::check_sequential(bound.unwrap_or(4), seq::DEFAULT_LENGTH));
        out.push(seq::check_guards(bound.unwrap_or(4)));
    }
    if matches!(scope, Scope::Commute | Scope::All) {
        out.push(commute::check_commute(bound.unwrap_or(5)));
    }
    if matches!(scope, Scope::Stability | Scope::All) {
        out.push(stability::check_stability(bound.unwrap_or(5)));
    }
    out
}

/// A small tree plus the operations (from one origin) that build it.
#[derive(Clone, Debug)]
pub struct Shape {
    pub state: TreeState,
    pub prefix: Vec<Operation>,
    /// Non-root nodes in creation order.
    pub nodes: Vec<NodeId>,
}

/// Every tree with `1..=max_nodes` nodes (root included) and every subset of
/// its non-root nodes tombstoned, built by `origin`.
///
/// Node `i` hangs under one of the nodes created before it, so every rooted
/// tree shape appears (some more than once, under different labels).
pub fn shapes(max_nodes: usize, origin: ReplicaId) -> Vec<Shape> {
    let mut out = Vec::new();
    for k in 1..=max_nodes.max(1) {
        for parents in parent_vectors(k - 1) {
            let mut state = TreeState::new();
            let mut clock = VectorClock::new();
            let mut prefix = Vec::new();
            let mut nodes: Vec<NodeId> = Vec::new();
            for &p in &parents {
                let parent = if p == 0 { NodeId::Root } else { nodes[p - 1] };
                let op = generate(origin, &mut clock, &state, OpRequest::Add { parent }).expect("fresh add");
                state.add(op.target(), parent).expect("fresh add");
                nodes.push(op.target());
                prefix.push(op);
            }
            for mask in 0u32..(1 << nodes.len()) {
                let mut s = state.clone();
                let mut c = clock.clone();
                let mut pre = prefix.clone();
                for (i, &n) in nodes.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        let op = generate(origin, &mut c, &s, OpRequest::Remove { node: n }).expect("remove");
                        s.remove(n).expect("remove");
                        pre.push(op);
                    }
                }
                out.push(Shape { state: s, prefix: pre, nodes: nodes.clone() });
            }
        }
    }
    out
}

/// All vectors `v` of length `len` with `v[i] <= i`: `v[i]` is the parent of
/// node `i + 1`, where 0 is the root.
fn parent_vectors(len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for i in 0..len {
        out = out
            .into_iter()
            .flat_map(|v| {
                (0..=i).map(move |p| {
                    let mut w = v.clone();
                    w.push(p);
                    w
                })
            })
            .collect();
    }
    out
}

/// Every request whose precondition holds in `state`, adds included (one add
/// per possible parent).
pub fn valid_requests(state: &TreeState) -> Vec<OpRequest> {
    let nodes: Vec<NodeId> = state.nodes().iter().copied().collect();
    let mut out: Vec<OpRequest> = nodes.iter().map(|&p| OpRequest::Add { parent: p }).collect();
    out.extend(nodes.iter().filter(|n| !n.is_root()).map(|&n| OpRequest::Remove { node: n }));
    for &n in &nodes {
        for &p in &nodes {
            if state.check_move(n, p).is_ok() {
                out.push(OpRequest::Move { node: n, new_parent: p });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    use std::collections::BTreeSet;

    fn canonical(s: &TreeState, n: NodeId) -> String {
        let mut kids: Vec<String> =
            s.parents().iter().filter(|(c, p)| **p == n && **c != n).map(|(c, _)| canonical(s, *c)).collect();
        kids.sort();
        format!("({})", kids.concat())
    }

    #[test]
    fn every_unlabeled_shape_appears() {
        // rooted unlabeled trees on 1..=5 nodes
        let known = [1, 1, 2, 4, 9];
        let all = shapes(5, 2);
        for (k, &count) in known.iter().enumerate() {
            let distinct: BTreeSet<String> = all
                .iter()
                .filter(|sh| sh.state.len() == k + 1 && sh.state.tombstones().is_empty())
                .map(|sh| canonical(&sh.state, NodeId::Root))
                .collect();
            assert_eq!(distinct.len(), count, "{} nodes", k + 1);
        }
        for sh in &all {
            assert!(sh.state.check_invariant().all_ok());
        }
        let with_tombstones = all.iter().filter(|sh| sh.state.len() == 5).count();
        assert_eq!(with_tombstones, 24 * 16);
    }

    #[test]
    fn valid_requests_pass_their_checks() {
        for sh in shapes(4, 2) {
            for req in valid_requests(&sh.state) {
                assert!(generate(0, &mut VectorClock::new(), &sh.state, req).is_ok());
            }
        }
    }
}
