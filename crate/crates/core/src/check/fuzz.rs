//! Randomized workloads under random causal delivery schedules.
//!
//! A schedule is a list of [`Action`]s. Running one draws each action from a
//! seeded RNG and executes it at once, so the recorded list replays to the
//! same run. After every step the touched replica is checked:
//!
//! - its tree satisfies the invariant;
//! - Maram: the incremental state equals [`resolve`] of its delivered log;
//! - UDR: the state equals replaying the delivered log in key order;
//! - an operation once reported stable keeps its applied/skipped status.
//!
//! At the end every channel is drained, a heartbeat round is exchanged, and
//! all replicas must hold the same tree with nothing left buffered.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{NaiveReplica, UdrReplica};
use crate::crdt::{apply_one, resolve, MaramReplica, Message, OpId, OpRequest, OpStatus, Operation};
use crate::replica::Replica;
use crate::sim::config::Mix;
use crate::sim::workload::{fallback_add, pick_crossing, pick_request, RequestKind};
use crate::tree::{ReplicaId, TreeState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuzzAlgorithm {
    Maram,
    Udr,
    Naive,
}

impl std::str::FromStr for FuzzAlgorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "maram" => Ok(FuzzAlgorithm::Maram),
            "udr" => Ok(FuzzAlgorithm::Udr),
            "naive" => Ok(FuzzAlgorithm::Naive),
            _ => Err(format!("unknown algorithm {s:?} (expected maram, udr or naive)")),
        }
    }
}

/// One schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub algorithm: FuzzAlgorithm,
    pub replicas: u32,
    /// Operations generated across all replicas.
    pub ops: usize,
    /// Fraction of moves issued as half of a crossing pair.
    pub conflict_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum Action {
    /// `replica` generates an operation for `request`.
    Gen { replica: ReplicaId, request: OpRequest },
    /// `to` receives entry `index` of the channel from `from`.
    Deliver { from: ReplicaId, to: ReplicaId, index: usize },
    /// `replica` sends its clock to every peer.
    Heartbeat { replica: ReplicaId },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Invariant { replica: ReplicaId, step: usize, report: String },
    Diverged { replica: ReplicaId, step: usize, detail: String },
    StabilityChanged { replica: ReplicaId, step: usize, op: OpId, detail: String },
    NotConverged { detail: String },
    BadTrace { step: usize, detail: String },
}

impl Violation {
    pub fn label(&self) -> &'static str {
        match self {
            Violation::Invariant { .. } => "invariant",
            Violation::Diverged { .. } => "diverged",
            Violation::StabilityChanged { .. } => "stability",
            Violation::NotConverged { .. } => "convergence",
            Violation::BadTrace { .. } => "trace",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Invariant { replica, step, report } => {
                write!(f, "step {step}: replica {replica} breaks the invariant ({report})")
            }
            Violation::Diverged { replica, step, detail } => write!(f, "step {step}: replica {replica}: {detail}"),
            Violation::StabilityChanged { replica, step, op, detail } => {
                write!(f, "step {step}: replica {replica} changed the outcome of stable {op}: {detail}")
            }
            Violation::NotConverged { detail } => write!(f, "replicas did not converge: {detail}"),
            Violation::BadTrace { step, detail } => write!(f, "step {step}: {detail}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FuzzOutcome {
    pub config: FuzzConfig,
    pub actions: Vec<Action>,
    pub violations: Vec<Violation>,
    /// Operations found stable and re-checked afterwards.
    pub stable_checked: usize,
}

impl FuzzOutcome {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Writes the config followed by one action per line.
    pub fn write_trace(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", serde_json::to_string(&self.config).map_err(std::io::Error::other)?)?;
        for a in &self.actions {
            writeln!(out, "{}", serde_json::to_string(a).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }
}

pub fn read_trace(input: impl BufRead) -> Result<(FuzzConfig, Vec<Action>), String> {
    let mut lines = input.lines();
    let head = lines.next().ok_or("empty trace")?.map_err(|e| e.to_string())?;
    let config: FuzzConfig = serde_json::from_str(&head).map_err(|e| format!("line 1: {e}"))?;
    let mut actions = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        actions.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 2))?);
    }
    Ok((config, actions))
}

enum Rep {
    Maram(MaramReplica),
    Udr(UdrReplica),
    Naive(NaiveReplica),
}

impl Rep {
    fn get(&self) -> &dyn Replica {
        match self {
            Rep::Maram(r) => r,
            Rep::Udr(r) => r,
            Rep::Naive(r) => r,
        }
    }

    fn get_mut(&mut self) -> &mut dyn Replica {
        match self {
            Rep::Maram(r) => r,
            Rep::Udr(r) => r,
            Rep::Naive(r) => r,
        }
    }

    /// `(id, applied)` for every delivered operation, where tracked.
    fn entries(&self) -> Vec<(OpId, bool)> {
        let log = match self {
            Rep::Maram(r) => r.replay(),
            Rep::Udr(r) => r.replay(),
            Rep::Naive(_) => return Vec::new(),
        };
        log.entries().iter().map(|e| (e.op.id, e.applied)).collect()
    }
}

fn rep_kind(rep: &Rep, id: OpId) -> String {
    let log = match rep {
        Rep::Maram(r) => r.replay(),
        Rep::Udr(r) => r.replay(),
        Rep::Naive(_) => return "op".into(),
    };
    log.get(id).map(|e| format!("{:?}", e.op.kind)).unwrap_or_default()
}

struct Run {
    cfg: FuzzConfig,
    reps: Vec<Rep>,
    channels: BTreeMap<(ReplicaId, ReplicaId), VecDeque<Message>>,
    /// Stable operations per replica with the status seen when they became stable.
    stable: Vec<BTreeMap<OpId, OpStatus>>,
    violations: Vec<Violation>,
    step: usize,
}

impl Run {
    fn new(cfg: FuzzConfig) -> Self {
        let n = cfg.replicas;
        let reps = (0..n)
            .map(|i| match cfg.algorithm {
                FuzzAlgorithm::Maram => Rep::Maram(MaramReplica::new(i, 0..n)),
                FuzzAlgorithm::Udr => Rep::Udr(UdrReplica::new(i, 0..n)),
                FuzzAlgorithm::Naive => Rep::Naive(NaiveReplica::new(i, 0..n)),
            })
            .collect();
        let mut channels = BTreeMap::new();
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    channels.insert((a, b), VecDeque::new());
                }
            }
        }
        Run { cfg, reps, channels, stable: vec![BTreeMap::new(); n as usize], violations: Vec::new(), step: 0 }
    }

    fn broadcast(&mut self, from: ReplicaId, msg: Message) {
        for ((a, _), q) in self.channels.iter_mut() {
            if *a == from {
                q.push_back(msg.clone());
            }
        }
    }

    fn execute(&mut self, action: &Action) {
        match *action {
            Action::Gen { replica, request } => match self.reps[replica as usize].get_mut().submit(request) {
                Ok(op) => {
                    self.broadcast(replica, Message::Op(op));
                    self.after(replica);
                }
                Err(e) => self
                    .violations
                    .push(Violation::BadTrace { step: self.step, detail: format!("replica {replica}: {e}") }),
            },
            Action::Deliver { from, to, index } => {
                let Some(q) = self.channels.get_mut(&(from, to)) else {
                    self.violations
                        .push(Violation::BadTrace { step: self.step, detail: format!("no channel {from}->{to}") });
                    return;
                };
                let Some(msg) = q.remove(index) else {
                    self.violations.push(Violation::BadTrace {
                        step: self.step,
                        detail: format!("channel {from}->{to} has no entry {index}"),
                    });
                    return;
                };
                self.reps[to as usize].get_mut().receive(msg);
                self.after(to);
            }
            Action::Heartbeat { replica } => {
                let hb = self.reps[replica as usize].get().heartbeat();
                self.broadcast(replica, hb);
            }
        }
        self.step += 1;
    }

    fn after(&mut self, r: ReplicaId) {
        let step = self.step;
        let rep = &self.reps[r as usize];
        let state = rep.get().state();
        let inv = state.check_invariant();
        if !inv.all_ok() {
            self.violations.push(Violation::Invariant { replica: r, step, report: inv.to_string() });
        }
        match rep {
            Rep::Maram(m) => {
                let log = m.log();
                match resolve(&log) {
                    Ok(s) if &s == state => {}
                    Ok(s) => self.violations.push(Violation::Diverged {
                        replica: r,
                        step,
                        detail: format!("incremental state differs from resolve\n{}vs\n{}", state.render(), s.render()),
                    }),
                    Err(e) => self.violations.push(Violation::Diverged { replica: r, step, detail: e.to_string() }),
                }
            }
            Rep::Udr(u) => {
                let mut ops: Vec<&Operation> = u.replay().entries().iter().map(|e| &e.op).collect();
                ops.sort_by_key(|o| o.key());
                let mut s = TreeState::new();
                for op in ops {
                    apply_one(&mut s, op);
                }
                if &s != state {
                    self.violations.push(Violation::Diverged {
                        replica: r,
                        step,
                        detail: "state differs from key-order replay".into(),
                    });
                }
            }
            Rep::Naive(_) => {}
        }
        let seen = &mut self.stable[r as usize];
        for (id, applied) in rep.entries() {
            let status = if applied { OpStatus::Applied } else { OpStatus::Skipped };
            match seen.get(&id) {
                Some(&before) if before != status => {
                    let kind = rep_kind(rep, id);
                    self.violations.push(Violation::StabilityChanged {
                        replica: r,
                        step,
                        op: id,
                        detail: format!("{kind} went from {before:?} to {status:?}"),
                    })
                }
                Some(_) => {}
                None => {
                    if rep.get().is_stable(id).unwrap_or(false) {
                        seen.insert(id, status);
                    }
                }
            }
        }
    }

    fn pending(&self) -> Vec<(ReplicaId, ReplicaId)> {
        self.channels.iter().filter(|(_, q)| !q.is_empty()).map(|(k, _)| *k).collect()
    }

    /// Delivers everything in FIFO order, then lets every replica advertise
    /// its clock and delivers that too.
    fn drain(&mut self, actions: &mut Vec<Action>) {
        let flush = |run: &mut Run, actions: &mut Vec<Action>| {
            while let Some(&(from, to)) = run.pending().first() {
                let a = Action::Deliver { from, to, index: 0 };
                run.execute(&a);
                actions.push(a);
            }
        };
        flush(self, actions);
        for r in 0..self.cfg.replicas {
            let a = Action::Heartbeat { replica: r };
            self.execute(&a);
            actions.push(a);
        }
        flush(self, actions);
    }

    fn finish(&mut self) {
        let first = self.reps[0].get().state().clone();
        for (i, rep) in self.reps.iter().enumerate() {
            let r = rep.get();
            if r.buffered() > 0 {
                self.violations.push(Violation::NotConverged {
                    detail: format!("replica {i} still buffers {} messages", r.buffered()),
                });
            }
            if r.state() != &first {
                self.violations.push(Violation::NotConverged {
                    detail: format!("replica {i} differs from replica 0\n{}vs\n{}", r.state().render(), first.render()),
                });
            }
        }
        if self.cfg.algorithm != FuzzAlgorithm::Naive {
            for (i, rep) in self.reps.iter().enumerate() {
                let unstable =
                    rep.entries().iter().filter(|(id, _)| !rep.get().is_stable(*id).unwrap_or(false)).count();
                if unstable > 0 {
                    self.violations.push(Violation::NotConverged {
                        detail: format!("replica {i}: {unstable} operations never stabilized"),
                    });
                }
            }
        }
    }

    fn outcome(self, actions: Vec<Action>) -> FuzzOutcome {
        let stable_checked = self.stable.iter().map(|m| m.len()).sum();
        FuzzOutcome { config: self.cfg, actions, violations: self.violations, stable_checked }
    }
}

/// Chance that a delivery takes a random queued message instead of the oldest.
const REORDER: f64 = 0.1;
const HEARTBEAT: f64 = 0.05;
/// Crossing pairs per generation step at conflict rate 1: each pair is two of
/// the default mix's 28% moves.
const PAIR_SHARE: f64 = 0.14;

fn draw_request(state: &TreeState, rng: &mut ChaCha8Rng) -> OpRequest {
    let mix = Mix::default();
    let x = rng.random_range(0..mix.total());
    let kind = if x < mix.add {
        RequestKind::Add
    } else if x < mix.add + mix.remove {
        RequestKind::Remove
    } else if x < mix.add + mix.remove + mix.upmove {
        RequestKind::UpMove
    } else {
        RequestKind::DownMove
    };
    pick_request(state, kind, rng).unwrap_or_else(|| fallback_add(state, rng))
}

/// Runs one random schedule.
pub fn fuzz_once(cfg: FuzzConfig) -> FuzzOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut run = Run::new(cfg);
    let mut actions = Vec::new();
    let mut generated = 0;
    let replicas: Vec<ReplicaId> = (0..cfg.replicas).collect();
    while generated < cfg.ops || !run.pending().is_empty() {
        let pending = run.pending();
        let gen = generated < cfg.ops && (pending.is_empty() || rng.random_bool(0.4));
        let mut step = Vec::new();
        if gen {
            let r = *replicas.choose(&mut rng).expect("replicas");
            let state = run.reps[r as usize].get().state();
            let crossing = cfg.replicas > 1
                && generated + 1 < cfg.ops
                && rng.random_bool(cfg.conflict_rate.clamp(0.0, 1.0) * PAIR_SHARE);
            match crossing.then(|| pick_crossing(state, &mut rng)).flatten() {
                Some(((u, v2), (v, u2))) => {
                    step.push(Action::Gen { replica: r, request: OpRequest::Move { node: u, new_parent: v2 } });
                    let peers: Vec<ReplicaId> = replicas.iter().copied().filter(|&x| x != r).collect();
                    let other = *peers.choose(&mut rng).expect("peer");
                    if run.reps[other as usize].get().state().check_move(v, u2).is_ok() {
                        step.push(Action::Gen { replica: other, request: OpRequest::Move { node: v, new_parent: u2 } });
                    }
                }
                None => step.push(Action::Gen { replica: r, request: draw_request(state, &mut rng) }),
            }
        } else if rng.random_bool(HEARTBEAT) {
            step.push(Action::Heartbeat { replica: *replicas.choose(&mut rng).expect("replicas") });
        } else {
            let &(from, to) = pending.choose(&mut rng).expect("pending");
            let len = run.channels[&(from, to)].len();
            let index = if rng.random_bool(REORDER) { rng.random_range(0..len) } else { 0 };
            step.push(Action::Deliver { from, to, index });
        }
        for a in step {
            if matches!(a, Action::Gen { .. }) {
                generated += 1;
            }
            run.execute(&a);
            actions.push(a);
        }
    }
    run.drain(&mut actions);
    run.finish();
    run.outcome(actions)
}

/// Re-executes a recorded schedule, draining whatever it leaves queued.
/// Checks are the same as [`fuzz_once`].
pub fn replay_trace(cfg: FuzzConfig, actions: &[Action]) -> FuzzOutcome {
    let mut run = Run::new(cfg);
    for a in actions {
        run.execute(a);
    }
    let mut tail = Vec::new();
    if !run.pending().is_empty() {
        run.drain(&mut tail);
    }
    run.finish();
    let mut all = actions.to_vec();
    all.extend(tail);
    run.outcome(all)
}

/// Shrinks a failing schedule: first the operation count under the same seed,
/// then single actions of the recorded schedule, keeping the first violation's
/// kind.
pub fn shrink(failing: &FuzzOutcome) -> FuzzOutcome {
    let Some(kind) = failing.violations.first().map(Violation::label) else {
        return failing.clone();
    };
    let fails = |o: &FuzzOutcome| o.violations.first().map(Violation::label) == Some(kind);
    let mut best = failing.clone();
    let mut ops = best.config.ops;
    while ops > 1 {
        let cand = fuzz_once(FuzzConfig { ops: ops - 1, ..best.config });
        if !fails(&cand) {
            break;
        }
        ops -= 1;
        best = cand;
    }
    let mut i = 0;
    let mut budget = 2000;
    while i < best.actions.len() && budget > 0 {
        budget -= 1;
        let mut actions = best.actions.clone();
        actions.remove(i);
        let cand = replay_trace(best.config, &actions);
        if fails(&cand) && cand.actions.len() < best.actions.len() {
            best = cand;
        } else {
            i += 1;
        }
    }
    best
}

/// A batch of schedules with per-schedule parameters drawn from `seed`.
#[derive(Clone, Debug)]
pub struct FuzzPlan {
    pub algorithm: FuzzAlgorithm,
    pub schedules: usize,
    pub seed: u64,
    pub replicas: u32,
    pub ops: RangeInclusive<usize>,
    pub conflict_rates: Vec<f64>,
}

impl FuzzPlan {
    pub fn configs(&self) -> Vec<FuzzConfig> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.schedules)
            .map(|i| FuzzConfig {
                algorithm: self.algorithm,
                replicas: self.replicas,
                ops: rng.random_range(self.ops.clone()),
                conflict_rate: *self.conflict_rates.choose(&mut rng).unwrap_or(&0.0),
                seed: self.seed.wrapping_add(i as u64),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FuzzSummary {
    pub schedules: usize,
    pub operations: usize,
    pub stable_checked: usize,
    /// Failing schedules, in seed order.
    pub failures: Vec<FuzzOutcome>,
}

impl FuzzSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn fuzz_many(plan: &FuzzPlan) -> FuzzSummary {
    let outcomes: Vec<FuzzOutcome> = plan.configs().into_par_iter().map(fuzz_once).collect();
    FuzzSummary {
        schedules: outcomes.len(),
        operations: outcomes.iter().map(|o| o.config.ops).sum(),
        stable_checked: outcomes.iter().map(|o| o.stable_checked).sum(),
        failures: outcomes.into_iter().filter(|o| !o.passed()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(algorithm: FuzzAlgorithm, seed: u64) -> FuzzConfig {
        FuzzConfig { algorithm, replicas: 3, ops: 60, conflict_rate: 0.2, seed }
    }

    #[test]
    fn maram_and_udr_schedules_pass() {
        for seed in 0..10 {
            for alg in [FuzzAlgorithm::Maram, FuzzAlgorithm::Udr] {
                let o = fuzz_once(cfg(alg, seed));
                assert!(o.passed(), "{alg:?} seed {seed}: {}", o.violations[0]);
            }
        }
    }

    #[test]
    fn runs_are_deterministic_and_replayable() {
        let a = fuzz_once(cfg(FuzzAlgorithm::Maram, 5));
        let b = fuzz_once(cfg(FuzzAlgorithm::Maram, 5));
        assert_eq!(a.actions, b.actions);
        let mut buf = Vec::new();
        a.write_trace(&mut buf).unwrap();
        let (c, actions) = read_trace(&buf[..]).unwrap();
        assert_eq!(c, a.config);
        let r = replay_trace(c, &actions);
        assert_eq!(r.actions, a.actions);
        assert!(r.passed());
    }

    #[test]
    fn naive_breaks_and_shrinks() {
        let bad = (0..40)
            .map(|s| fuzz_once(FuzzConfig { ops: 120, ..cfg(FuzzAlgorithm::Naive, s) }))
            .find(|o| o.violations.iter().any(|v| v.label() == "invariant"))
            .expect("naive should break the invariant");
        let small = shrink(&bad);
        assert!(!small.passed());
        assert!(small.actions.len() <= bad.actions.len());
        let again = replay_trace(small.config, &small.actions[..]);
        assert_eq!(again.violations.first().map(Violation::label), small.violations.first().map(Violation::label));
    }

    #[test]
    fn bad_trace_is_reported() {
        let c = cfg(FuzzAlgorithm::Maram, 0);
        let o = replay_trace(c, &[Action::Deliver { from: 0, to: 1, index: 0 }]);
        assert_eq!(o.violations[0].label(), "trace");
    }
}
