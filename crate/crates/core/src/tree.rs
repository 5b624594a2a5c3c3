//! Sequential tree state and the structural queries every replica flavor
//! builds on.
//!
//! The tree is stored as a single child → parent map. Tombstoned nodes stay in
//! the structure: they keep their parent pointer, keep counting toward rank and
//! ancestry, and are only hidden by [`TreeState::abstract_view`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Identifier of a replica in the system.
pub type ReplicaId = u32;

/// A tree node identifier.
///
/// Non-root nodes are named by the replica that created them plus a counter
/// local to that replica, which makes them unique without coordination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Root,
    Node { origin: ReplicaId, seq: u64 },
}

impl NodeId {
    pub const fn new(origin: ReplicaId, seq: u64) -> Self {
        NodeId::Node { origin, seq }
    }

    pub fn is_root(self) -> bool {
        matches!(self, NodeId::Root)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Root => f.write_str("root"),
            NodeId::Node { origin, seq } => write!(f, "{origin}:{seq}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid node id {0:?}")]
pub struct ParseNodeIdError(String);

impl FromStr for NodeId {
    type Err = ParseNodeIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "root" {
            return Ok(NodeId::Root);
        }
        let (origin, seq) = s.split_once(':').ok_or_else(|| ParseNodeIdError(s.to_string()))?;
        let origin = origin.parse().map_err(|_| ParseNodeIdError(s.to_string()))?;
        let seq = seq.parse().map_err(|_| ParseNodeIdError(s.to_string()))?;
        Ok(NodeId::Node { origin, seq })
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("node-not-found: {0}")]
    NodeNotFound(NodeId),
    #[error("duplicate-node: {0}")]
    DuplicateNode(NodeId),
    #[error("parent-not-found: {0}")]
    ParentNotFound(NodeId),
    #[error("cannot-remove-root")]
    CannotRemoveRoot,
    #[error("cannot-move-root")]
    CannotMoveRoot,
    #[error("self-parent: {0}")]
    SelfParent(NodeId),
    #[error("cycle-precondition-violated: {new_parent} is a descendant of {node}")]
    CycleViolation { node: NodeId, new_parent: NodeId },
    /// The parent walk from this node never reaches the root. Only possible
    /// on states that already violate the tree invariant.
    #[error("node {0} does not reach the root")]
    Unrooted(NodeId),
}

/// Direction of a move relative to the root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoveType {
    /// Destination is strictly nearer to the root than the moved node.
    Up,
    /// Destination is at the same depth or deeper.
    Down,
}

/// Query-time views over a state with tombstones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbstractionMode {
    /// Hide tombstoned nodes together with their whole subtree.
    Skipping,
    /// Hide tombstoned nodes unless some live node sits below them.
    Keeping,
}

/// Outcome of [`TreeState::check_invariant`], one flag per clause.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct InvariantReport {
    pub root_ok: bool,
    pub parent_ok: bool,
    pub unique_ok: bool,
    pub reachable_ok: bool,
    /// Tombstones must be a subset of the node set.
    pub tombstones_ok: bool,
    pub root_witness: Option<NodeId>,
    pub parent_witness: Option<NodeId>,
    pub unique_witness: Option<NodeId>,
    pub reachable_witness: Option<NodeId>,
    pub tombstones_witness: Option<NodeId>,
}

impl InvariantReport {
    pub fn all_ok(&self) -> bool {
        self.root_ok && self.parent_ok && self.unique_ok && self.reachable_ok && self.tombstones_ok
    }
}

impl fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let clause = |ok: bool, w: Option<NodeId>| match (ok, w) {
            (true, _) => "ok".to_string(),
            (false, Some(w)) => format!("FAIL ({w})"),
            (false, None) => "FAIL".to_string(),
        };
        write!(
            f,
            "root: {}, parent: {}, unique: {}, reachable: {}, tombstones: {}",
            clause(self.root_ok, self.root_witness),
            clause(self.parent_ok, self.parent_witness),
            clause(self.unique_ok, self.unique_witness),
            clause(self.reachable_ok, self.reachable_witness),
            clause(self.tombstones_ok, self.tombstones_witness),
        )
    }
}

/// The replicated tree state: node set, child → parent map and tombstones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeState {
    nodes: BTreeSet<NodeId>,
    parent: BTreeMap<NodeId, NodeId>,
    tombstones: BTreeSet<NodeId>,
}

impl Default for TreeState {
    fn default() -> Self {
        Self::new()
    }
}

impl TreeState {
    /// The initial state: only the root, which is its own parent.
    pub fn new() -> Self {
        TreeState {
            nodes: BTreeSet::from([NodeId::Root]),
            parent: BTreeMap::from([(NodeId::Root, NodeId::Root)]),
            tombstones: BTreeSet::new(),
        }
    }

    /// Builds a state from raw parts without validation. Used to construct
    /// broken states for the invariant checker.
    pub fn from_parts(nodes: BTreeSet<NodeId>, parent: BTreeMap<NodeId, NodeId>, tombstones: BTreeSet<NodeId>) -> Self {
        TreeState { nodes, parent, tombstones }
    }

    pub fn root(&self) -> NodeId {
        NodeId::Root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.nodes.contains(&n)
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn parents(&self) -> &BTreeMap<NodeId, NodeId> {
        &self.parent
    }

    pub fn tombstones(&self) -> &BTreeSet<NodeId> {
        &self.tombstones
    }

    pub fn parent_of(&self, n: NodeId) -> Option<NodeId> {
        self.parent.get(&n).copied()
    }

    pub fn is_tombstoned(&self, n: NodeId) -> bool {
        self.tombstones.contains(&n)
    }

    fn ensure(&self, n: NodeId) -> Result<(), TreeError> {
        if self.nodes.contains(&n) {
            Ok(())
        } else {
            Err(TreeError::NodeNotFound(n))
        }
    }

    /// The sequence of nodes from `n` (inclusive) up to the root (inclusive).
    pub fn root_path(&self, n: NodeId) -> Result<Vec<NodeId>, TreeError> {
        self.ensure(n)?;
        let mut path = vec![n];
        let mut cur = n;
        while cur != NodeId::Root {
            if path.len() > self.nodes.len() {
                return Err(TreeError::Unrooted(n));
            }
            cur = self.parent_of(cur).ok_or(TreeError::Unrooted(n))?;
            path.push(cur);
        }
        Ok(path)
    }

    /// True iff `a` is reachable from `n` by following at least one parent
    /// edge. The root's self-loop does not count, so the root has no strict
    /// ancestors.
    pub fn is_strict_ancestor(&self, a: NodeId, n: NodeId) -> Result<bool, TreeError> {
        self.ensure(a)?;
        self.ensure(n)?;
        let mut cur = n;
        for _ in 0..self.nodes.len() {
            if cur == NodeId::Root {
                return Ok(false);
            }
            cur = self.parent_of(cur).ok_or(TreeError::Unrooted(n))?;
            if cur == a {
                return Ok(true);
            }
        }
        if cur == NodeId::Root {
            Ok(false)
        } else {
            Err(TreeError::Unrooted(n))
        }
    }

    /// Number of parent edges between `n` and the root.
    pub fn rank(&self, n: NodeId) -> Result<usize, TreeError> {
        Ok(self.root_path(n)?.len() - 1)
    }

    /// `p_new` and those of its ancestors that are neither `n` nor an
    /// ancestor of `n`.
    pub fn critical_ancestors(&self, n: NodeId, p_new: NodeId) -> Result<BTreeSet<NodeId>, TreeError> {
        let own: BTreeSet<NodeId> = self.root_path(n)?.into_iter().collect();
        Ok(self.root_path(p_new)?.into_iter().take_while(|a| !own.contains(a)).collect())
    }

    /// `n` and every node below it.
    pub fn critical_descendants(&self, n: NodeId) -> Result<BTreeSet<NodeId>, TreeError> {
        self.ensure(n)?;
        let mut out = BTreeSet::new();
        for &d in &self.nodes {
            if self.root_path(d)?.contains(&n) {
                out.insert(d);
            }
        }
        Ok(out)
    }

    pub fn classify_move(&self, n: NodeId, p_new: NodeId) -> Result<MoveType, TreeError> {
        if self.rank(n)? > self.rank(p_new)? {
            Ok(MoveType::Up)
        } else {
            Ok(MoveType::Down)
        }
    }

    pub fn check_add(&self, n: NodeId, p: NodeId) -> Result<(), TreeError> {
        if self.nodes.contains(&n) {
            return Err(TreeError::DuplicateNode(n));
        }
        if !self.nodes.contains(&p) {
            return Err(TreeError::ParentNotFound(p));
        }
        Ok(())
    }

    pub fn check_remove(&self, n: NodeId) -> Result<(), TreeError> {
        self.ensure(n)?;
        if n.is_root() {
            return Err(TreeError::CannotRemoveRoot);
        }
        Ok(())
    }

    pub fn check_move(&self, n: NodeId, p_new: NodeId) -> Result<(), TreeError> {
        self.ensure(n)?;
        self.ensure(p_new)?;
        if n.is_root() {
            return Err(TreeError::CannotMoveRoot);
        }
        if n == p_new {
            return Err(TreeError::SelfParent(n));
        }
        if self.is_strict_ancestor(n, p_new)? {
            return Err(TreeError::CycleViolation { node: n, new_parent: p_new });
        }
        Ok(())
    }

    pub fn add(&mut self, n: NodeId, p: NodeId) -> Result<(), TreeError> {
        self.check_add(n, p)?;
        self.nodes.insert(n);
        self.parent.insert(n, p);
        Ok(())
    }

    /// Tombstones `n`. Returns whether the tombstone is new.
    pub fn remove(&mut self, n: NodeId) -> Result<bool, TreeError> {
        self.check_remove(n)?;
        Ok(self.tombstones.insert(n))
    }

    /// Re-parents `n` under `p_new`. Returns the previous parent.
    pub fn move_node(&mut self, n: NodeId, p_new: NodeId) -> Result<NodeId, TreeError> {
        self.check_move(n, p_new)?;
        Ok(self.parent.insert(n, p_new).expect("checked node has a parent"))
    }

    pub(crate) fn insert_unchecked(&mut self, n: NodeId, p: NodeId) {
        self.nodes.insert(n);
        self.parent.insert(n, p);
    }

    pub(crate) fn delete_unchecked(&mut self, n: NodeId) {
        self.nodes.remove(&n);
        self.parent.remove(&n);
    }

    pub(crate) fn set_parent_unchecked(&mut self, n: NodeId, p: NodeId) -> Option<NodeId> {
        self.parent.insert(n, p)
    }

    pub(crate) fn tombstone_unchecked(&mut self, n: NodeId) -> bool {
        self.tombstones.insert(n)
    }

    pub(crate) fn untombstone(&mut self, n: NodeId) {
        self.tombstones.remove(&n);
    }

    /// Visible nodes under the given abstraction.
    pub fn abstract_view(&self, mode: AbstractionMode) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        for &n in &self.nodes {
            let Ok(path) = self.root_path(n) else { continue };
            match mode {
                AbstractionMode::Skipping => {
                    if path.iter().all(|a| !self.tombstones.contains(a)) {
                        out.insert(n);
                    }
                }
                AbstractionMode::Keeping => {
                    if !self.tombstones.contains(&n) {
                        out.extend(path);
                    }
                }
            }
        }
        out
    }

    /// Evaluates every invariant clause. Terminates on arbitrary (including
    /// cyclic) states.
    pub fn check_invariant(&self) -> InvariantReport {
        let mut report = InvariantReport {
            root_ok: true,
            parent_ok: true,
            unique_ok: true,
            reachable_ok: true,
            tombstones_ok: true,
            ..Default::default()
        };

        if !self.nodes.contains(&NodeId::Root)
            || self.parent_of(NodeId::Root) != Some(NodeId::Root)
            || self.tombstones.contains(&NodeId::Root)
        {
            report.root_ok = false;
            report.root_witness = Some(NodeId::Root);
        }

        for &n in &self.nodes {
            match self.parent_of(n) {
                Some(p) if self.nodes.contains(&p) => {}
                _ => {
                    report.parent_ok = false;
                    report.parent_witness = Some(n);
                    break;
                }
            }
        }

        // The map is single-valued by construction; what can still go wrong is
        // a parent entry for something outside the node set.
        if let Some(&stray) = self.parent.keys().find(|k| !self.nodes.contains(k)) {
            report.unique_ok = false;
            report.unique_witness = Some(stray);
        }

        // Walk up from every node over dense indices; `reached` memoizes
        // nodes already known to lead to the root.
        let order: Vec<NodeId> = self.nodes.iter().copied().collect();
        let up: Vec<Option<usize>> =
            order.iter().map(|n| self.parent_of(*n).and_then(|p| order.binary_search(&p).ok())).collect();
        let mut reached = vec![false; order.len()];
        if report.root_ok {
            if let Ok(r) = order.binary_search(&NodeId::Root) {
                reached[r] = true;
            }
        }
        let mut walk = Vec::new();
        'outer: for start in 0..order.len() {
            walk.clear();
            let mut cur = start;
            for _ in 0..=order.len() {
                if reached[cur] {
                    for &w in &walk {
                        reached[w] = true;
                    }
                    continue 'outer;
                }
                walk.push(cur);
                match up[cur] {
                    Some(p) if p != cur => cur = p,
                    _ => break,
                }
            }
            report.reachable_ok = false;
            report.reachable_witness = Some(order[start]);
            break;
        }

        if let Some(&t) = self.tombstones.iter().find(|t| !self.nodes.contains(t)) {
            report.tombstones_ok = false;
            report.tombstones_witness = Some(t);
        }

        report
    }

    /// Indented rendering of the keeping view. Tombstoned nodes carry a `†`.
    pub fn render(&self) -> String {
        let visible = self.abstract_view(AbstractionMode::Keeping);
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &n in &visible {
            if let Some(p) = self.parent_of(n) {
                if p != n {
                    children.entry(p).or_default().push(n);
                }
            }
        }
        let mut out = String::new();
        let mut stack = vec![(NodeId::Root, 0usize)];
        while let Some((n, depth)) = stack.pop() {
            let mark = if self.is_tombstoned(n) { " †" } else { "" };
            out.push_str(&format!("{}{}{}\n", "  ".repeat(depth), n, mark));
            if let Some(cs) = children.get(&n) {
                for &c in cs.iter().rev() {
                    stack.push((c, depth + 1));
                }
            }
        }
        out
    }
}
