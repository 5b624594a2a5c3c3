use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tree::ReplicaId;

/// Result of comparing two vector clocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockOrdering {
    Less,
    Greater,
    Equal,
    Concurrent,
}

/// Per-replica event counters. Absent entries read as zero and zero entries
/// are never stored, so structural equality is clock equality.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "BTreeMap<ReplicaId, u64>", into = "BTreeMap<ReplicaId, u64>")]
pub struct VectorClock {
    entries: BTreeMap<ReplicaId, u64>,
}

impl From<BTreeMap<ReplicaId, u64>> for VectorClock {
    fn from(mut entries: BTreeMap<ReplicaId, u64>) -> Self {
        entries.retain(|_, v| *v > 0);
        VectorClock { entries }
    }
}

impl From<VectorClock> for BTreeMap<ReplicaId, u64> {
    fn from(vc: VectorClock) -> Self {
        vc.entries
    }
}

impl<const N: usize> From<[u64; N]> for VectorClock {
    fn from(counts: [u64; N]) -> Self {
        counts.iter().enumerate().map(|(i, &c)| (i as ReplicaId, c)).collect::<BTreeMap<_, _>>().into()
    }
}

impl VectorClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, replica: ReplicaId) -> u64 {
        self.entries.get(&replica).copied().unwrap_or(0)
    }

    pub fn set(&mut self, replica: ReplicaId, value: u64) {
        if value == 0 {
            self.entries.remove(&replica);
        } else {
            self.entries.insert(replica, value);
        }
    }

    /// Increments the entry for `replica` and returns the new value.
    pub fn tick(&mut self, replica: ReplicaId) -> u64 {
        let e = self.entries.entry(replica).or_insert(0);
        *e += 1;
        *e
    }

    /// Pointwise maximum.
    pub fn merge(&mut self, other: &VectorClock) {
        for (&r, &v) in &other.entries {
            let e = self.entries.entry(r).or_insert(0);
            *e = (*e).max(v);
        }
    }

    /// Sum of all entries. Strictly increases along happens-before.
    pub fn sum(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ReplicaId, u64)> + '_ {
        self.entries.iter().map(|(&r, &v)| (r, v))
    }

    /// True iff every entry of `self` is at most the matching entry of `other`.
    pub fn le(&self, other: &VectorClock) -> bool {
        self.entries.iter().all(|(&r, &v)| v <= other.get(r))
    }

    pub fn compare(&self, other: &VectorClock) -> ClockOrdering {
        match (self.le(other), other.le(self)) {
            (true, true) => ClockOrdering::Equal,
            (true, false) => ClockOrdering::Less,
            (false, true) => ClockOrdering::Greater,
            (false, false) => ClockOrdering::Concurrent,
        }
    }

    pub fn concurrent_with(&self, other: &VectorClock) -> bool {
        self.compare(other) == ClockOrdering::Concurrent
    }
}
