//! Request streams for the concurrent phase, plus the shared warm-up prefix.
//!
//! Slots only fix when a replica issues a request and of which kind. The
//! concrete nodes are chosen when the slot fires, against the issuing
//! replica's state at that instant, so every request satisfies its
//! precondition at its origin.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use super::config::{LatencyMatrix, Mix, SimConfig};
use super::SimError;
use crate::crdt::{apply_one, generate, OpRequest, Operation, VectorClock};
use crate::tree::{NodeId, ReplicaId, TreeState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Add,
    Remove,
    UpMove,
    DownMove,
}

impl RequestKind {
    pub fn is_move(self) -> bool {
        matches!(self, RequestKind::UpMove | RequestKind::DownMove)
    }

    fn draw(mix: &Mix, rng: &mut impl Rng) -> Self {
        let x = rng.random_range(0..mix.total());
        if x < mix.add {
            RequestKind::Add
        } else if x < mix.add + mix.remove {
            RequestKind::Remove
        } else if x < mix.add + mix.remove + mix.upmove {
            RequestKind::UpMove
        } else {
            RequestKind::DownMove
        }
    }
}

/// Part a slot plays in a targeted conflicting pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PairRole {
    /// Picks the crossing nodes and issues the first move.
    Lead { pair: usize },
    /// Issues the crossing move shortly after, before the lead's move arrives.
    Follow { pair: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Slot {
    pub time_us: u64,
    pub kind: RequestKind,
    /// Seed for picking concrete nodes at issue time.
    pub intent: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair: Option<PairRole>,
}

#[derive(Clone, Debug)]
pub struct Workload {
    /// Sequential prefix issued by replica 0 and delivered everywhere at t=0.
    pub warmup: Vec<Operation>,
    /// One time-ordered request stream per replica.
    pub streams: Vec<Vec<Slot>>,
    pub pairs: usize,
}

impl Workload {
    pub fn requests(&self) -> usize {
        self.streams.iter().map(Vec::len).sum()
    }

    pub fn targeted_moves(&self) -> usize {
        2 * self.pairs
    }

    /// Canonical text form of the request streams, for determinism checks.
    pub fn streams_json(&self) -> String {
        serde_json::to_string(&self.streams).expect("slots serialize")
    }
}

pub fn gen_workload(cfg: &SimConfig, latency: &LatencyMatrix, seed: u64) -> Result<Workload, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warmup = gen_warmup(cfg.warmup_nodes, &Mix::default(), &mut rng)?;
    if cfg.ops_per_replica > 0 && cfg.mix.moves() > 0 && cfg.warmup_nodes < 3 {
        return Err(SimError::Infeasible(format!(
            "moves need at least 3 nodes after warm-up, got {}",
            cfg.warmup_nodes
        )));
    }

    let gap_us = cfg.mean_gap_ms * 1000.0;
    let gap = (gap_us > 0.0).then(|| Exp::new(1.0 / gap_us).expect("positive rate"));
    let mut streams: Vec<Vec<Slot>> = (0..cfg.replicas)
        .map(|_| {
            let mut t = 0u64;
            (0..cfg.ops_per_replica)
                .map(|_| {
                    t += gap.map_or(0, |g| g.sample(&mut rng).round() as u64).max(1);
                    Slot { time_us: t, kind: RequestKind::draw(&cfg.mix, &mut rng), intent: rng.next_u64(), pair: None }
                })
                .collect()
        })
        .collect();

    let mut move_slots: Vec<(usize, usize)> = streams
        .iter()
        .enumerate()
        .flat_map(|(r, s)| s.iter().enumerate().filter(|(_, x)| x.kind.is_move()).map(move |(i, _)| (r, i)))
        .collect();
    let targeted = (cfg.conflict_rate / 100.0 * move_slots.len() as f64).round() as usize;
    move_slots.shuffle(&mut rng);
    let mut used = vec![false; move_slots.len()];
    let mut pairs = 0;
    for a in 0..move_slots.len() {
        if 2 * (pairs + 1) > targeted {
            break;
        }
        if used[a] {
            continue;
        }
        let (ra, ia) = move_slots[a];
        let Some(b) = (a + 1..move_slots.len()).find(|&b| !used[b] && move_slots[b].0 != ra) else {
            continue;
        };
        used[a] = true;
        used[b] = true;
        let (rb, ib) = move_slots[b];
        let lead_time = streams[ra][ia].time_us;
        streams[ra][ia].pair = Some(PairRole::Lead { pair: pairs });
        let window = latency.us(ra as ReplicaId, rb as ReplicaId);
        streams[rb][ib].time_us = lead_time + 1 + rng.random_range(0..=window);
        streams[rb][ib].pair = Some(PairRole::Follow { pair: pairs });
        pairs += 1;
    }
    for s in &mut streams {
        s.sort_by_key(|x| x.time_us);
    }
    Ok(Workload { warmup, streams, pairs })
}

/// Grows a tree from the root to `nodes` nodes with a sequential mix of
/// operations at replica 0. The simulator always uses the default mix here,
/// whatever the concurrent phase draws from.
pub fn gen_warmup(nodes: usize, mix: &Mix, rng: &mut impl Rng) -> Result<Vec<Operation>, SimError> {
    if nodes == 0 {
        return Err(SimError::Infeasible("warm-up tree must contain the root".into()));
    }
    if nodes > 1 && mix.add == 0 {
        return Err(SimError::Infeasible("warm-up mix has no adds".into()));
    }
    let mut state = TreeState::new();
    let mut clock = VectorClock::new();
    let mut ops = Vec::new();
    while state.len() < nodes {
        let kind = RequestKind::draw(mix, rng);
        let mut pick = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let req = pick_request(&state, kind, &mut pick).unwrap_or_else(|| fallback_add(&state, &mut pick));
        let op = generate(0, &mut clock, &state, req).expect("picked requests are valid");
        apply_one(&mut state, &op);
        ops.push(op);
    }
    Ok(ops)
}

fn live(state: &TreeState) -> Vec<NodeId> {
    state.nodes().iter().copied().filter(|n| !state.is_tombstoned(*n)).collect()
}

fn live_non_root(state: &TreeState) -> Vec<NodeId> {
    state.nodes().iter().copied().filter(|n| !n.is_root() && !state.is_tombstoned(*n)).collect()
}

pub fn fallback_add(state: &TreeState, rng: &mut impl Rng) -> OpRequest {
    let parents = live(state);
    OpRequest::Add { parent: *parents.choose(rng).unwrap_or(&NodeId::Root) }
}

const ATTEMPTS: usize = 64;

/// Picks concrete, currently valid arguments for a request of `kind`, or
/// `None` when no candidate was found.
pub fn pick_request(state: &TreeState, kind: RequestKind, rng: &mut impl Rng) -> Option<OpRequest> {
    match kind {
        RequestKind::Add => Some(fallback_add(state, rng)),
        RequestKind::Remove => live_non_root(state).choose(rng).map(|&node| OpRequest::Remove { node }),
        RequestKind::UpMove | RequestKind::DownMove => {
            let movable = live_non_root(state);
            let dests = live(state);
            if movable.is_empty() {
                return None;
            }
            let up = kind == RequestKind::UpMove;
            for _ in 0..ATTEMPTS {
                let n = *movable.choose(rng)?;
                let p = *dests.choose(rng)?;
                let (Ok(rn), Ok(rp)) = (state.rank(n), state.rank(p)) else { continue };
                let wanted = if up { rp < rn && state.parent_of(n) != Some(p) } else { rp >= rn };
                if wanted && state.check_move(n, p).is_ok() {
                    return Some(OpRequest::Move { node: n, new_parent: p });
                }
            }
            None
        }
    }
}

/// Picks two incomparable live nodes `u`, `v` and a live descendant of each.
/// The lead moves `u` under `v'`; the follower later moves `v` under `u'`.
pub fn pick_crossing(state: &TreeState, rng: &mut impl Rng) -> Option<((NodeId, NodeId), (NodeId, NodeId))> {
    let movable = live_non_root(state);
    if movable.len() < 2 {
        return None;
    }
    for _ in 0..ATTEMPTS {
        let u = *movable.choose(rng)?;
        let v = *movable.choose(rng)?;
        if u == v || state.is_strict_ancestor(u, v).unwrap_or(true) || state.is_strict_ancestor(v, u).unwrap_or(true) {
            continue;
        }
        let below = |x: NodeId, rng: &mut dyn RngCore| -> Option<NodeId> {
            let sub: Vec<NodeId> =
                state.critical_descendants(x).ok()?.into_iter().filter(|d| !state.is_tombstoned(*d)).collect();
            sub.choose(rng).copied()
        };
        let (Some(u2), Some(v2)) = (below(u, rng), below(v, rng)) else { continue };
        return Some(((u, v2), (v, u2)));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crdt::encode_op;
    use crate::sim::config::Algorithm;

    fn cfg(rate: f64) -> SimConfig {
        let mut c = SimConfig::new(Algorithm::Maram);
        c.conflict_rate = rate;
        c
    }

    #[test]
    fn warmup_reaches_node_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ops = gen_warmup(997, &Mix::default(), &mut rng).unwrap();
        let mut s = TreeState::new();
        for op in &ops {
            assert!(apply_one(&mut s, op).0);
        }
        assert_eq!(s.len(), 997);
        assert!(s.check_invariant().all_ok());
        assert!(ops.iter().any(|o| o.is_move()));
    }

    #[test]
    fn same_seed_same_streams() {
        let c = cfg(20.0);
        let m = c.latency_matrix().unwrap();
        let a = gen_workload(&c, &m, 11).unwrap();
        let b = gen_workload(&c, &m, 11).unwrap();
        assert_eq!(a.streams_json(), b.streams_json());
        let enc = |w: &Workload| w.warmup.iter().flat_map(encode_op).collect::<Vec<u8>>();
        assert_eq!(enc(&a), enc(&b));
        let c2 = gen_workload(&c, &m, 12).unwrap();
        assert_ne!(a.streams_json(), c2.streams_json());
    }

    #[test]
    fn targeted_count_follows_rate() {
        let m = cfg(0.0).latency_matrix().unwrap();
        for rate in [0.0, 2.0, 10.0, 20.0] {
            let c = cfg(rate);
            let w = gen_workload(&c, &m, 5).unwrap();
            let moves = w.streams.iter().flatten().filter(|s| s.kind.is_move()).count();
            let expect = (rate / 100.0 * moves as f64).round() as usize;
            assert!(w.targeted_moves() == expect || w.targeted_moves() + 1 == expect, "{rate}");
            assert_eq!(w.requests(), 750);
            for s in &w.streams {
                assert!(s.windows(2).all(|p| p[0].time_us <= p[1].time_us));
            }
            let leads = w.streams.iter().flatten().filter(|s| matches!(s.pair, Some(PairRole::Lead { .. }))).count();
            assert_eq!(leads, w.pairs);
        }
    }

    #[test]
    fn partner_issues_within_one_link_latency() {
        let c = cfg(20.0);
        let m = c.latency_matrix().unwrap();
        let w = gen_workload(&c, &m, 9).unwrap();
        let mut lead = vec![None; w.pairs];
        let mut follow = vec![None; w.pairs];
        for (r, s) in w.streams.iter().enumerate() {
            for slot in s {
                match slot.pair {
                    Some(PairRole::Lead { pair }) => lead[pair] = Some((r, slot.time_us)),
                    Some(PairRole::Follow { pair }) => follow[pair] = Some((r, slot.time_us)),
                    None => {}
                }
            }
        }
        for (l, f) in lead.into_iter().zip(follow) {
            let ((ra, ta), (rb, tb)) = (l.unwrap(), f.unwrap());
            assert_ne!(ra, rb);
            assert!(tb > ta && tb <= ta + 1 + m.us(ra as u32, rb as u32));
        }
    }

    #[test]
    fn picked_requests_are_valid_and_typed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ops = gen_warmup(200, &Mix::default(), &mut rng).unwrap();
        let mut s = TreeState::new();
        for op in &ops {
            apply_one(&mut s, op);
        }
        for kind in [RequestKind::Add, RequestKind::Remove, RequestKind::UpMove, RequestKind::DownMove] {
            for _ in 0..50 {
                let req = pick_request(&s, kind, &mut rng).unwrap();
                let op = generate(1, &mut VectorClock::new(), &s, req).unwrap();
                match kind {
                    RequestKind::UpMove => assert_eq!(op.mtype(), Some(crate::tree::MoveType::Up)),
                    RequestKind::DownMove => assert_eq!(op.mtype(), Some(crate::tree::MoveType::Down)),
                    _ => assert!(!op.is_move()),
                }
            }
        }
        for _ in 0..50 {
            let ((u, v2), (v, u2)) = pick_crossing(&s, &mut rng).unwrap();
            let mut c = VectorClock::new();
            let x = generate(1, &mut c, &s, OpRequest::Move { node: u, new_parent: v2 }).unwrap();
            let y = generate(2, &mut VectorClock::new(), &s, OpRequest::Move { node: v, new_parent: u2 }).unwrap();
            assert!(crate::crdt::crit_anc_overlap(&x, &y).unwrap());
        }
    }
}
