use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use super::config::{Algorithm, LatencyMatrix, SimConfig};
use super::metrics::{OpRecord, RecordStatus, RunMetrics};
use super::workload::{fallback_add, gen_workload, pick_crossing, pick_request, PairRole, Workload};
use super::SimError;
use crate::baselines::{global_locks, subtree_locks, Grant, LockManager, LockMode, LockReplica, LockRequest};
use crate::baselines::{NaiveReplica, UdrReplica};
use crate::crdt::{
    crit_anc_overlap, encode_op, MaramReplica, Message, OpId, OpRequest, OpStatus, Operation, VectorClock,
};
use crate::replica::Replica;
use crate::tree::{NodeId, ReplicaId, TreeState};

/// Simulated cost of logging and acknowledging a request locally.
pub const APPLY_COST_US: u64 = 10;

/// Replica hosting the lock manager.
pub const LOCK_SITE: ReplicaId = 0;

#[derive(Clone, Debug)]
enum Event {
    Issue { replica: ReplicaId, slot: usize },
    Deliver { to: ReplicaId, msg: Message },
    Heartbeat { replica: ReplicaId },
    LockRequest(LockRequest),
    LockGrant(Grant),
    LockRelease { request: u64, clock: VectorClock },
}

/// Everything a single simulation produced.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub metrics: RunMetrics,
    pub final_states: Vec<TreeState>,
    /// JSON lines, when tracing was requested.
    pub trace: Vec<String>,
}

struct PendingMove {
    record: usize,
    replica: ReplicaId,
    node: NodeId,
    new_parent: NodeId,
    shared: BTreeSet<String>,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    run: usize,
    latency: LatencyMatrix,
    workload: Workload,
    replicas: Vec<Box<dyn Replica>>,
    queue: BinaryHeap<Reverse<(u64, ReplicaId, u64)>>,
    events: HashMap<u64, Event>,
    next_seq: u64,
    now: u64,

    records: Vec<OpRecord>,
    by_op: HashMap<OpId, usize>,
    unstable: usize,
    generated: Vec<Operation>,
    moves: HashSet<OpId>,
    follow: HashMap<usize, (NodeId, NodeId)>,
    issued: usize,
    ops_in_flight: usize,
    messages: u64,
    violations: u64,
    /// Replicas whose state passed the last full invariant check.
    valid: Vec<bool>,

    manager: LockManager,
    pending_moves: HashMap<u64, PendingMove>,
    next_request: u64,
    requested_at: HashMap<u64, u64>,
    max_lock_wait: u64,
    parked: Vec<Vec<Grant>>,

    trace: Option<Vec<String>>,
}

fn make_replica(alg: Algorithm, id: ReplicaId, n: usize) -> Box<dyn Replica> {
    let ids = 0..n as ReplicaId;
    match alg {
        Algorithm::Maram => Box::new(MaramReplica::new(id, ids)),
        Algorithm::Udr => Box::new(UdrReplica::new(id, ids)),
        Algorithm::GlobalLock | Algorithm::SubtreeLock => Box::new(LockReplica::new(id, ids)),
        Algorithm::Naive => Box::new(NaiveReplica::new(id, ids)),
    }
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig, run: usize, trace: bool) -> Result<Self, SimError> {
        cfg.validate()?;
        let latency = cfg.latency_matrix()?;
        let workload = gen_workload(cfg, &latency, cfg.run_seed(run))?;
        let n = cfg.replicas;
        let mut replicas: Vec<Box<dyn Replica>> =
            (0..n).map(|i| make_replica(cfg.algorithm, i as ReplicaId, n)).collect();
        for op in &workload.warmup {
            for r in replicas.iter_mut() {
                r.receive(Message::Op(op.clone()));
            }
        }
        Ok(Sim {
            cfg,
            run,
            latency,
            workload,
            replicas,
            queue: BinaryHeap::new(),
            events: HashMap::new(),
            next_seq: 0,
            now: 0,
            records: Vec::new(),
            by_op: HashMap::new(),
            unstable: 0,
            generated: Vec::new(),
            moves: HashSet::new(),
            follow: HashMap::new(),
            issued: 0,
            ops_in_flight: 0,
            messages: 0,
            violations: 0,
            valid: vec![true; n],
            manager: LockManager::new(LOCK_SITE),
            pending_moves: HashMap::new(),
            next_request: 0,
            requested_at: HashMap::new(),
            max_lock_wait: 0,
            parked: vec![Vec::new(); n],
            trace: trace.then(Vec::new),
        })
    }

    fn schedule(&mut self, at: u64, actor: ReplicaId, ev: Event) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse((at, actor, seq)));
        self.events.insert(seq, ev);
    }

    fn log(&mut self, value: serde_json::Value) {
        if let Some(t) = &mut self.trace {
            t.push(value.to_string());
        }
    }

    fn requests_total(&self) -> usize {
        self.workload.requests()
    }

    fn done(&self) -> bool {
        self.issued == self.requests_total()
            && self.ops_in_flight == 0
            && self.pending_moves.is_empty()
            && self.unstable == 0
    }

    fn run(mut self) -> Result<SimOutput, SimError> {
        for (r, stream) in self.workload.streams.clone().iter().enumerate() {
            for (i, slot) in stream.iter().enumerate() {
                self.schedule(slot.time_us, r as ReplicaId, Event::Issue { replica: r as ReplicaId, slot: i });
            }
        }
        let hb = (self.cfg.heartbeat_ms * 1000.0).round().max(1.0) as u64;
        if self.cfg.algorithm.tracks_stability() && self.cfg.replicas > 1 {
            for r in 0..self.cfg.replicas as ReplicaId {
                self.schedule(hb, r, Event::Heartbeat { replica: r });
            }
        }
        let last_issue = self.workload.streams.iter().filter_map(|s| s.last()).map(|s| s.time_us).max().unwrap_or(0);
        let max_latency = (0..self.cfg.replicas as ReplicaId)
            .flat_map(|i| (0..self.cfg.replicas as ReplicaId).map(move |j| (i, j)))
            .map(|(i, j)| self.latency.us(i, j))
            .max()
            .unwrap_or(0);
        let deadline = last_issue + 1000 * (max_latency + hb) + 600_000_000;

        while !self.done() {
            let Some(Reverse((at, _, seq))) = self.queue.pop() else {
                return Err(SimError::Stalled("event queue drained before the run completed".into()));
            };
            if at > deadline {
                return Err(SimError::Stalled(format!("run still busy at {} ms", at / 1000)));
            }
            self.now = at;
            let ev = self.events.remove(&seq).expect("scheduled event");
            self.handle(ev, hb);
        }
        Ok(self.finish())
    }

    fn handle(&mut self, ev: Event, hb: u64) {
        match ev {
            Event::Issue { replica, slot } => self.issue(replica, slot),
            Event::Deliver { to, msg } => self.deliver(to, msg),
            Event::Heartbeat { replica } => {
                let msg = self.replicas[replica as usize].heartbeat();
                self.broadcast(replica, self.now, msg);
                self.schedule(self.now + hb, replica, Event::Heartbeat { replica });
            }
            Event::LockRequest(req) => {
                self.log(json!({"t_us": self.now, "kind": "lock_req", "request": req.id, "from": req.requester,
                    "locks": req.locks.iter().map(|(n, m)| format!("{n}:{}", if *m == LockMode::Shared { "S" } else { "X" })).collect::<Vec<_>>()}));
                self.requested_at.insert(req.id, self.now);
                let grants = self.manager.request(req);
                self.send_grants(grants);
            }
            Event::LockGrant(grant) => {
                self.log(
                    json!({"t_us": self.now, "kind": "lock_grant", "request": grant.request, "to": grant.requester}),
                );
                let r = grant.requester as usize;
                if grant.clock.le(self.replicas[r].clock()) {
                    self.validate(grant);
                } else {
                    self.parked[r].push(grant);
                }
            }
            Event::LockRelease { request, clock } => {
                self.log(json!({"t_us": self.now, "kind": "lock_rel", "request": request}));
                let grants = self.manager.release(request, &clock);
                self.send_grants(grants);
            }
        }
    }

    fn send_grants(&mut self, grants: Vec<Grant>) {
        for g in grants {
            let wait = self.now - self.requested_at.remove(&g.request).unwrap_or(self.now);
            self.max_lock_wait = self.max_lock_wait.max(wait);
            let at = self.now + self.latency.us(LOCK_SITE, g.requester);
            self.schedule(at, g.requester, Event::LockGrant(g));
        }
    }

    fn broadcast(&mut self, from: ReplicaId, at: u64, msg: Message) {
        let is_op = matches!(msg, Message::Op(_));
        for to in 0..self.cfg.replicas as ReplicaId {
            if to == from {
                continue;
            }
            if self.trace.is_some() {
                let payload = match &msg {
                    Message::Op(op) => {
                        json!({"op": serde_json::from_slice::<serde_json::Value>(&encode_op(op)).expect("wire json")})
                    }
                    Message::Heartbeat(h) => json!({"heartbeat": h.vc}),
                };
                self.log(json!({"t_us": at, "kind": "send", "from": from, "to": to, "msg": payload}));
            }
            if is_op {
                self.ops_in_flight += 1;
            }
            self.messages += 1;
            self.schedule(at + self.latency.us(from, to), to, Event::Deliver { to, msg: msg.clone() });
        }
    }

    /// Counts a violation if replica `r` fails the tree invariant. Adds and
    /// removes cannot break a valid tree, so those skip the full check.
    fn check(&mut self, r: ReplicaId, moved: bool) {
        let r = r as usize;
        if !moved && self.valid[r] {
            return;
        }
        self.valid[r] = self.replicas[r].state().check_invariant().all_ok();
        if !self.valid[r] {
            self.violations += 1;
        }
    }

    fn collect_stable(&mut self, r: ReplicaId) {
        for id in self.replicas[r as usize].take_stabilized() {
            if let Some(&i) = self.by_op.get(&id) {
                let rec = &mut self.records[i];
                if rec.stable_us == u64::MAX {
                    rec.stable_us = self.now.max(rec.ack_us);
                    self.unstable -= 1;
                }
            }
        }
    }

    fn deliver(&mut self, to: ReplicaId, msg: Message) {
        if let Message::Op(op) = &msg {
            self.ops_in_flight -= 1;
            let id = op.id;
            self.log(json!({"t_us": self.now, "kind": "deliver", "to": to, "op": id.to_string()}));
        }
        let delivered = self.replicas[to as usize].receive(msg);
        if !delivered.is_empty() {
            let moved = delivered.iter().any(|id| self.moves.contains(id));
            self.check(to, moved);
        }
        self.collect_stable(to);
        if !self.parked[to as usize].is_empty() {
            let clock = self.replicas[to as usize].clock().clone();
            let (ready, waiting): (Vec<Grant>, Vec<Grant>) =
                std::mem::take(&mut self.parked[to as usize]).into_iter().partition(|g| g.clock.le(&clock));
            self.parked[to as usize] = waiting;
            for g in ready {
                self.validate(g);
            }
        }
    }

    fn pick(&mut self, replica: ReplicaId, slot: usize) -> OpRequest {
        let s = self.workload.streams[replica as usize][slot];
        let mut rng = ChaCha8Rng::seed_from_u64(s.intent);
        let state = self.replicas[replica as usize].state();
        match s.pair {
            Some(PairRole::Lead { pair }) => {
                if let Some((lead, follow)) = pick_crossing(state, &mut rng) {
                    self.follow.insert(pair, follow);
                    return OpRequest::Move { node: lead.0, new_parent: lead.1 };
                }
            }
            Some(PairRole::Follow { pair }) => {
                if let Some(&(n, p)) = self.follow.get(&pair) {
                    if state.check_move(n, p).is_ok() {
                        return OpRequest::Move { node: n, new_parent: p };
                    }
                }
            }
            None => {}
        }
        pick_request(state, s.kind, &mut rng).unwrap_or_else(|| fallback_add(state, &mut rng))
    }

    fn issue(&mut self, replica: ReplicaId, slot: usize) {
        self.issued += 1;
        let req = self.pick(replica, slot);
        self.log(json!({"t_us": self.now, "kind": "issue", "replica": replica, "request": req}));
        let record = self.records.len();
        let (kind, mtype) = match req {
            OpRequest::Add { .. } => ("add", None),
            OpRequest::Remove { .. } => ("remove", None),
            OpRequest::Move { node, new_parent } => {
                ("move", self.replicas[replica as usize].state().classify_move(node, new_parent).ok())
            }
        };
        self.records.push(OpRecord {
            run: self.run,
            op_id: format!("{replica}:a{slot}"),
            origin: replica,
            kind,
            mtype,
            submit_us: self.now,
            ack_us: self.now,
            stable_us: self.now,
            status: RecordStatus::Aborted,
        });

        if let (true, OpRequest::Move { node, new_parent }) = (self.cfg.algorithm.uses_locks(), req) {
            let locks = if self.cfg.algorithm == Algorithm::GlobalLock {
                global_locks()
            } else {
                subtree_locks(self.replicas[replica as usize].state(), node, new_parent)
                    .expect("picked move is valid at its origin")
            };
            let id = self.next_request;
            self.next_request += 1;
            let shared = locks.iter().filter(|(_, m)| *m == LockMode::Shared).map(|(n, _)| n.clone()).collect();
            self.pending_moves.insert(id, PendingMove { record, replica, node, new_parent, shared });
            let at = self.now + self.latency.us(replica, LOCK_SITE);
            self.schedule(at, LOCK_SITE, Event::LockRequest(LockRequest { id, requester: replica, locks }));
            return;
        }
        self.apply(replica, record, req);
    }

    /// Applies a request at its origin and ships the effector.
    fn apply(&mut self, replica: ReplicaId, record: usize, req: OpRequest) {
        let op = self.replicas[replica as usize].submit(req).expect("request is valid at its origin");
        if op.is_move() {
            self.moves.insert(op.id);
        }
        self.check(replica, op.is_move());
        let ack = self.now + APPLY_COST_US;
        let stable_now = self.replicas[replica as usize].is_stable(op.id).unwrap_or(true);
        let rec = &mut self.records[record];
        rec.op_id = op.id.to_string();
        rec.ack_us = ack;
        rec.status = RecordStatus::Applied;
        if stable_now || !self.cfg.algorithm.tracks_stability() {
            rec.stable_us = ack;
        } else {
            rec.stable_us = u64::MAX;
            self.unstable += 1;
        }
        self.by_op.insert(op.id, record);
        self.generated.push(op.clone());
        self.broadcast(replica, ack, Message::Op(op));
    }

    fn validate(&mut self, grant: Grant) {
        let p = self.pending_moves.remove(&grant.request).expect("grant for a pending move");
        let state = self.replicas[p.replica as usize].state();
        let mut ok = state.check_move(p.node, p.new_parent).is_ok();
        if ok && self.cfg.algorithm == Algorithm::SubtreeLock {
            ok = match state.critical_ancestors(p.node, p.new_parent) {
                Ok(anc) => anc.iter().all(|a| p.shared.contains(&a.to_string())),
                Err(_) => false,
            };
        }
        let release_at = if ok {
            self.apply(p.replica, p.record, OpRequest::Move { node: p.node, new_parent: p.new_parent });
            self.now + APPLY_COST_US
        } else {
            let rec = &mut self.records[p.record];
            rec.ack_us = self.now;
            rec.stable_us = self.now;
            self.now
        };
        let clock = self.replicas[p.replica as usize].clock().clone();
        let at = release_at + self.latency.us(p.replica, LOCK_SITE);
        self.schedule(at, LOCK_SITE, Event::LockRelease { request: grant.request, clock });
    }

    fn finish(mut self) -> SimOutput {
        for rec in &mut self.records {
            if rec.status == RecordStatus::Aborted {
                continue;
            }
            let id: OpId = match rec.op_id.split_once(':') {
                Some((o, s)) => OpId { origin: o.parse().expect("origin"), seq: s.parse().expect("seq") },
                None => continue,
            };
            if self.replicas[rec.origin as usize].status(id) == Some(OpStatus::Skipped) {
                rec.status = RecordStatus::Skipped;
            }
        }
        let moves: Vec<&Operation> = self.generated.iter().filter(|o| o.is_move()).collect();
        let mut overlapping = 0;
        for (i, a) in moves.iter().enumerate() {
            for b in &moves[i + 1..] {
                if a.concurrent_with(b) && crit_anc_overlap(a, b).unwrap_or(false) {
                    overlapping += 1;
                }
            }
        }
        let bytes: usize = self.generated.iter().map(|o| encode_op(o).len()).sum();
        let warm = self.workload.warmup.len();
        let final_states: Vec<TreeState> = self.replicas.iter().map(|r| r.state().clone()).collect();
        let converged = final_states.windows(2).all(|w| w[0] == w[1]);
        let metrics = RunMetrics {
            run: self.run,
            seed: self.cfg.run_seed(self.run),
            algorithm: self.cfg.algorithm,
            conflict_rate: self.cfg.conflict_rate,
            latency_preset: self.cfg.latency.label().to_string(),
            records: self.records,
            invariant_violations: self.violations,
            targeted_moves: self.workload.targeted_moves(),
            overlapping_pairs: overlapping,
            converged,
            delivered: self.replicas.iter().map(|r| r.delivered() - warm).collect(),
            max_lock_wait_us: self.max_lock_wait,
            messages: self.messages,
            metadata_bytes_per_op: if self.generated.is_empty() {
                0.0
            } else {
                bytes as f64 / self.generated.len() as f64
            },
            redo_steps: self.replicas.iter().map(|r| r.work_units()).sum(),
            end_us: self.now,
        };
        SimOutput { metrics, final_states, trace: self.trace.unwrap_or_default() }
    }
}

/// Runs the `run`-th simulation of a config.
pub fn simulate_once(cfg: &SimConfig, run: usize, trace: bool) -> Result<SimOutput, SimError> {
    Sim::new(cfg, run, trace)?.run()
}

/// Runs all `cfg.runs` simulations, in parallel, returned in run order.
pub fn run_simulation(cfg: &SimConfig) -> Result<Vec<RunMetrics>, SimError> {
    cfg.validate()?;
    (0..cfg.runs).into_par_iter().map(|k| simulate_once(cfg, k, false).map(|o| o.metrics)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::config::{LatencyPreset, LatencySpec, Mix};

    fn small(alg: Algorithm) -> SimConfig {
        let mut c = SimConfig::new(alg);
        c.warmup_nodes = 60;
        c.ops_per_replica = 40;
        c
    }

    #[test]
    fn every_algorithm_drains_and_converges() {
        for alg in Algorithm::ALL {
            let mut c = small(alg);
            c.conflict_rate = 20.0;
            let out = simulate_once(&c, 0, false).unwrap();
            let m = &out.metrics;
            assert_eq!(m.records.len(), 120, "{alg}");
            assert!(m.converged, "{alg}");
            let applied = m.records.iter().filter(|r| r.status != RecordStatus::Aborted).count();
            assert!(m.delivered.iter().all(|&d| d == applied), "{alg}: {:?} vs {applied}", m.delivered);
            for r in &m.records {
                assert!(r.ack_us >= r.submit_us && r.stable_us >= r.ack_us);
            }
            if alg != Algorithm::Naive {
                assert_eq!(m.invariant_violations, 0, "{alg}");
            }
        }
    }

    #[test]
    fn deterministic() {
        let mut c = small(Algorithm::SubtreeLock);
        c.conflict_rate = 10.0;
        let a = simulate_once(&c, 3, true).unwrap();
        let b = simulate_once(&c, 3, true).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.trace, b.trace);
        assert!(a.trace.iter().any(|l| l.contains("\"lock_grant\"")));
    }

    #[test]
    fn sequential_zero_latency_runs_agree() {
        let mut states = Vec::new();
        for alg in Algorithm::ALL {
            let mut c = small(alg);
            c.latency = LatencySpec::Preset { preset: LatencyPreset::Zero };
            c.replicas = 1;
            states.push(simulate_once(&c, 0, false).unwrap().final_states.remove(0));
        }
        assert!(states.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn global_lock_from_far_site_pays_round_trip() {
        let mut c = small(Algorithm::GlobalLock);
        c.mix = Mix { add: 0, remove: 0, upmove: 50, downmove: 50 };
        c.ops_per_replica = 3;
        c.mean_gap_ms = 5000.0;
        let m = simulate_once(&c, 0, false).unwrap().metrics;
        for r in m.records.iter().filter(|r| r.origin == 1) {
            assert!(r.response_us() >= 288_000, "{}", r.response_us());
        }
    }

    #[test]
    fn maram_stability_only_for_moves() {
        let c = small(Algorithm::Maram);
        let m = simulate_once(&c, 0, false).unwrap().metrics;
        for r in &m.records {
            assert_eq!(r.stable_us > r.ack_us, r.mtype.is_some(), "{r:?}");
        }
        let u = simulate_once(&small(Algorithm::Udr), 0, false).unwrap().metrics;
        assert!(u.records.iter().all(|r| r.stable_us > r.ack_us));
    }
}
