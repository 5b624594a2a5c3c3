//! Acceptance criteria. Each test prints one PASS/FAIL line.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maram::check::commute::check_commute;
use maram::check::fuzz::{fuzz_many, FuzzAlgorithm, FuzzPlan, FuzzSummary, Violation};
use maram::check::seq::check_sequential;
use maram::crdt::{
    decode_message, decode_op, encode_message, encode_op, resolve, wins, Heartbeat, MaramReplica, Message, OpId,
    OpKind, OpRequest, Operation, Priority, VectorClock,
};
use maram::sim::{run_simulation, Algorithm, RecordStatus, RunMetrics, SimConfig};
use maram::{MoveType, NodeId, Replica, ReplicaId, TreeState};

const SEQ_MAX_NODES: usize = 4;
const SEQ_MAX_LEN: usize = 4;
const SEQ_TIME_LIMIT: Duration = Duration::from_secs(60);
const COMMUTE_MAX_NODES: usize = 5;
const FUZZ_SCHEDULES: usize = 1000;
const FUZZ_TIME_LIMIT: Duration = Duration::from_secs(600);
const ANTICHAINS: usize = 10_000;
const CODEC_CASES: usize = 10_000;
const MARAM_RESPONSE_CEIL_MS: f64 = 1.0;
const LOCK_RESPONSE_FLOOR_MS: f64 = 150.0;
const RESPONSE_RATIO_FLOOR: f64 = 10.0;
const STABILIZATION_FACTOR_FLOOR: f64 = 10.0;
const NAIVE_SEEDS: usize = 20;
const NAIVE_CONFLICT_RATE: f64 = 20.0;
/// Replica index of the Bangalore site in the real latency preset.
const BANGALORE: ReplicaId = 1;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    println!("{} [{criterion}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn c01_sequential_safety() {
    let t = Instant::now();
    let r = check_sequential(SEQ_MAX_NODES, SEQ_MAX_LEN);
    let elapsed = t.elapsed();
    let pass = r.passed() && elapsed < SEQ_TIME_LIMIT;
    report(
        1,
        "sequential safety",
        pass,
        &format!("{} cases, {} violations, {:.1}s; {}", r.cases, r.failures, elapsed.as_secs_f64(), r.notes.join("; ")),
    );
    assert!(pass, "{r}");
}

#[test]
fn c02_commutativity() {
    let r = check_commute(COMMUTE_MAX_NODES);
    report(2, "commutativity", r.passed(), &format!("{} pairs, {} divergences", r.cases, r.failures));
    assert!(r.passed(), "{r}");
}

fn maram_fuzz() -> &'static (FuzzSummary, Duration) {
    static RESULT: OnceLock<(FuzzSummary, Duration)> = OnceLock::new();
    RESULT.get_or_init(|| {
        let plan = FuzzPlan {
            algorithm: FuzzAlgorithm::Maram,
            schedules: FUZZ_SCHEDULES,
            seed: 20_240_601,
            replicas: 3,
            ops: 60..=250,
            conflict_rates: vec![0.0, 0.02, 0.10, 0.20],
        };
        let t = Instant::now();
        let s = fuzz_many(&plan);
        (s, t.elapsed())
    })
}

#[test]
fn c03_convergence_fuzz() {
    let (s, elapsed) = maram_fuzz();
    let pass = s.passed() && s.schedules == FUZZ_SCHEDULES && *elapsed < FUZZ_TIME_LIMIT;
    report(
        3,
        "convergence and safety fuzz",
        pass,
        &format!(
            "{} schedules, {} ops, {} failing, {:.1}s",
            s.schedules,
            s.operations,
            s.failures.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass, "{}", s.failures.first().map(|f| f.violations[0].to_string()).unwrap_or_default());
}

fn added(op: &Operation) -> NodeId {
    match op.kind {
        OpKind::Add { node, .. } => node,
        _ => panic!("not an add"),
    }
}

/// All interleavings of two two-step sequences.
fn interleavings() -> Vec<[(usize, bool); 4]> {
    let mut out = Vec::new();
    for mask in 0u8..16 {
        if mask.count_ones() != 2 {
            continue;
        }
        let mut next = [0usize, 0];
        let mut seq = [(0, false); 4];
        for (i, slot) in seq.iter_mut().enumerate() {
            let who = usize::from(mask >> i & 1 == 1);
            // step 0 generates, step 1 delivers
            *slot = (who, next[who] == 1);
            next[who] += 1;
        }
        out.push(seq);
    }
    out
}

#[test]
fn c04_two_move_scenario() {
    let orders = interleavings();
    assert_eq!(orders.len(), 6);
    let mut cases = 0;
    let mut bad = Vec::new();
    for first_is_ab in [true, false] {
        for order in &orders {
            cases += 1;
            let mut builder = MaramReplica::new(2, [0, 1, 2]);
            let add_a = builder.generate_op(OpRequest::Add { parent: NodeId::Root }).unwrap();
            let add_b = builder.generate_op(OpRequest::Add { parent: NodeId::Root }).unwrap();
            let (a, b) = (added(&add_a), added(&add_b));
            let mut movers = [MaramReplica::new(0, [0, 1, 2]), MaramReplica::new(1, [0, 1, 2])];
            for r in &mut movers {
                r.deliver(Message::Op(add_a.clone()));
                r.deliver(Message::Op(add_b.clone()));
            }
            // mover 0 issues a->b in the first priority order, b->a in the second
            let requests = if first_is_ab {
                [OpRequest::Move { node: a, new_parent: b }, OpRequest::Move { node: b, new_parent: a }]
            } else {
                [OpRequest::Move { node: b, new_parent: a }, OpRequest::Move { node: a, new_parent: b }]
            };
            let mut ops: [Option<Operation>; 2] = [None, None];
            for &(who, deliver) in order {
                if deliver {
                    if let Some(op) = &ops[who] {
                        movers[1 - who].deliver(Message::Op(op.clone()));
                        builder.deliver(Message::Op(op.clone()));
                    }
                } else {
                    ops[who] = movers[who].generate_op(requests[who]).ok();
                }
            }
            let states = [movers[0].state(), movers[1].state(), builder.state()];
            let s = states[0];
            let a_under_b = s.parent_of(a) == Some(b);
            let b_under_a = s.parent_of(b) == Some(a);
            let expected_winner = match (&ops[0], &ops[1]) {
                (Some(x), Some(y)) => {
                    let (px, py) = (x.prio().unwrap(), y.prio().unwrap());
                    let x_wins = (px.num, px.origin) > (py.num, py.origin);
                    if x_wins {
                        x.target()
                    } else {
                        y.target()
                    }
                }
                (Some(x), None) | (None, Some(x)) => x.target(),
                (None, None) => unreachable!("the first request is always valid"),
            };
            let winner_moved = if expected_winner == a { a_under_b } else { b_under_a };
            let ok = states.iter().all(|t| *t == s)
                && s.check_invariant().all_ok()
                && (a_under_b ^ b_under_a)
                && winner_moved;
            if !ok {
                bad.push(format!("order {order:?}, first_is_ab {first_is_ab}:\n{}", s.render()));
            }
        }
    }
    let pass = bad.is_empty();
    report(
        4,
        "two-move conflict scenario",
        pass,
        &format!("{cases} cases (2 priority orders x 6 interleavings), {} bad", bad.len()),
    );
    assert!(pass, "{}", bad.join("\n"));
}

/// Builds a random tree at replica `origin`, with some tombstones and moves.
fn random_build(rng: &mut ChaCha8Rng, origin: ReplicaId, peers: &[ReplicaId]) -> (Vec<Operation>, TreeState) {
    let mut b = MaramReplica::new(origin, peers.iter().copied());
    let size = rng.random_range(3..=25);
    let mut nodes = vec![NodeId::Root];
    let mut log = Vec::new();
    for _ in 0..size {
        let parent = *nodes.choose(rng).unwrap();
        let op = b.generate_op(OpRequest::Add { parent }).unwrap();
        nodes.push(added(&op));
        log.push(op);
    }
    for _ in 0..rng.random_range(0..4) {
        let node = nodes[rng.random_range(1..nodes.len())];
        let new_parent = *nodes.choose(rng).unwrap();
        if let Ok(op) = b.generate_op(OpRequest::Move { node, new_parent }) {
            log.push(op);
        }
        if rng.random_bool(0.3) {
            let node = nodes[rng.random_range(1..nodes.len())];
            if let Ok(op) = b.generate_op(OpRequest::Remove { node }) {
                log.push(op);
            }
        }
    }
    (log, b.state().clone())
}

/// Independent oracle for the rank-based move classification.
fn depth(s: &TreeState, mut n: NodeId) -> usize {
    let mut d = 0;
    while n != NodeId::Root {
        n = s.parents()[&n];
        d += 1;
    }
    d
}

#[test]
fn c05_up_move_antichains() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let peers: Vec<ReplicaId> = (0..=5).chain([9]).collect();
    let mut failures = Vec::new();
    let mut moves = 0;
    let mut done = 0;
    while done < ANTICHAINS {
        let (prefix, base) = random_build(&mut rng, 9, &peers);
        let mut candidates: Vec<(NodeId, NodeId)> = Vec::new();
        for &n in base.nodes() {
            for &p in base.nodes() {
                if n != NodeId::Root && depth(&base, p) < depth(&base, n) && base.parents()[&n] != p {
                    candidates.push((n, p));
                }
            }
        }
        candidates.shuffle(&mut rng);
        let k = rng.random_range(2..=6);
        let mut chosen: Vec<(NodeId, NodeId)> = Vec::new();
        for c in candidates {
            if chosen.len() < k && chosen.iter().all(|x| x.0 != c.0) {
                chosen.push(c);
            }
        }
        if chosen.len() < 2 {
            continue;
        }
        done += 1;
        let mut log = prefix.clone();
        let mut expected = base.parents().clone();
        for (i, &(node, new_parent)) in chosen.iter().enumerate() {
            let mut r = MaramReplica::new(i as ReplicaId, peers.iter().copied());
            for op in &prefix {
                r.deliver(Message::Op(op.clone()));
            }
            let op = r.generate_op(OpRequest::Move { node, new_parent }).expect("valid on the common tree");
            assert_eq!(op.mtype(), Some(MoveType::Up));
            expected.insert(node, new_parent);
            log.push(op);
        }
        moves += chosen.len();
        let all_win = log.iter().filter(|o| o.is_move() && o.id.origin != 9).all(|o| wins(o, &log).unwrap());
        let state = resolve(&log).unwrap();
        // a fresh replica receiving the moves in shuffled order agrees
        let mut tail = log[prefix.len()..].to_vec();
        tail.shuffle(&mut rng);
        let mut fresh = MaramReplica::new(8, peers.iter().copied().chain([8]));
        for op in prefix.iter().chain(&tail) {
            fresh.deliver(Message::Op(op.clone()));
        }
        let ok = all_win && state.check_invariant().all_ok() && *state.parents() == expected && fresh.state() == &state;
        if !ok && failures.len() < 3 {
            failures.push(format!("{chosen:?}\n{}", base.render()));
        }
    }
    let pass = failures.is_empty();
    report(5, "up-move antichains", pass, &format!("{done} antichains, {moves} up-moves, {} failures", failures.len()));
    assert!(pass, "{}", failures.join("\n"));
}

fn eval_config(algorithm: Algorithm, conflict_rate: f64, runs: usize) -> SimConfig {
    let mut c = SimConfig::new(algorithm);
    c.conflict_rate = conflict_rate;
    c.heartbeat_ms = 100.0;
    c.runs = runs;
    c
}

fn avg(runs: &[RunMetrics], f: impl Fn(&RunMetrics) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

#[test]
fn c06_response_time() {
    let maram = run_simulation(&eval_config(Algorithm::Maram, 10.0, 3)).unwrap();
    let lock = run_simulation(&eval_config(Algorithm::GlobalLock, 10.0, 3)).unwrap();
    let m_all = avg(&maram, |m| m.mean_move_response_ms(None));
    let l_all = avg(&lock, |m| m.mean_move_response_ms(None));
    let m_blr = avg(&maram, |m| m.mean_move_response_ms(Some(BANGALORE)));
    let l_blr = avg(&lock, |m| m.mean_move_response_ms(Some(BANGALORE)));
    let ratio = l_blr / m_blr;
    let pass = m_all < MARAM_RESPONSE_CEIL_MS && l_all >= LOCK_RESPONSE_FLOOR_MS && ratio >= RESPONSE_RATIO_FLOOR;
    report(
        6,
        "response time",
        pass,
        &format!(
            "maram move {m_all:.3} ms, global lock move {l_all:.1} ms, bangalore {l_blr:.1} / {m_blr:.3} = {ratio:.0}x"
        ),
    );
    assert!(pass);
}

#[test]
fn c07_stabilization_time() {
    let mut maram = Vec::new();
    let mut udr = Vec::new();
    for rate in [0.0, 10.0, 20.0] {
        maram.extend(run_simulation(&eval_config(Algorithm::Maram, rate, 1)).unwrap());
        udr.extend(run_simulation(&eval_config(Algorithm::Udr, rate, 1)).unwrap());
    }
    let mut not_immediate: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in maram.iter().flat_map(|m| &m.records) {
        if r.mtype == Some(MoveType::Down) || r.status == RecordStatus::Aborted {
            continue;
        }
        let kind = match r.mtype {
            Some(_) => "up-move",
            None => r.kind,
        };
        let e = not_immediate.entry(kind).or_default();
        e.0 += 1;
        e.1 += usize::from(r.stable_us != r.ack_us);
    }
    let immediate = not_immediate.values().all(|&(_, late)| late == 0);
    let down = avg(&maram, |m| m.mean_stabilization_where(|r| r.mtype == Some(MoveType::Down)));
    let m_all = avg(&maram, |m| m.mean_stabilization_ms());
    let u_all = avg(&udr, |m| m.mean_stabilization_ms());
    let factor = u_all / m_all;
    let pass = immediate && factor >= STABILIZATION_FACTOR_FLOOR;
    let late: Vec<String> =
        not_immediate.iter().map(|(k, (n, late))| format!("{k} {late}/{n} not stable at ack")).collect();
    report(
        7,
        "stabilization time",
        pass,
        &format!(
            "{}; maram down-move {down:.1} ms, maram overall {m_all:.1} ms, udr {u_all:.1} ms, factor {factor:.2}",
            late.join(", ")
        ),
    );
    assert!(pass, "factor {factor:.2} < {STABILIZATION_FACTOR_FLOOR}, or ops other than down-moves stayed transient");
}

#[test]
fn c08_naive_anomaly() {
    let mut detail = Vec::new();
    let mut naive_hits = 0;
    let mut others_clean = true;
    for alg in Algorithm::ALL {
        let runs = run_simulation(&eval_config(alg, NAIVE_CONFLICT_RATE, NAIVE_SEEDS)).unwrap();
        let hits = runs.iter().filter(|m| m.invariant_violations > 0).count();
        detail.push(format!("{} {hits}/{}", alg.name(), runs.len()));
        if alg == Algorithm::Naive {
            naive_hits = hits;
        } else {
            others_clean &= hits == 0 && runs.iter().all(|m| m.converged);
        }
    }
    let pass = naive_hits >= 1 && others_clean;
    report(8, "naive anomaly", pass, &format!("seeds with violations: {}", detail.join(", ")));
    assert!(pass);
}

#[test]
fn c09_stability_permanence() {
    let (s, _) = maram_fuzz();
    let changed = s
        .failures
        .iter()
        .flat_map(|f| &f.violations)
        .filter(|v| matches!(v, Violation::StabilityChanged { .. }))
        .count();
    let pass = changed == 0 && s.stable_checked > 0;
    report(
        9,
        "stability permanence",
        pass,
        &format!("{} stable ops rechecked over {} schedules, {changed} changed", s.stable_checked, s.schedules),
    );
    assert!(pass);
}

fn random_node(rng: &mut ChaCha8Rng) -> NodeId {
    if rng.random_bool(0.1) {
        NodeId::Root
    } else {
        NodeId::new(rng.random_range(0..8), rng.random_range(1..u64::from(u32::MAX)))
    }
}

fn random_op(rng: &mut ChaCha8Rng) -> Operation {
    let origin = rng.random_range(0..8);
    let seq = rng.random_range(1..100_000);
    let mut vc = VectorClock::new();
    vc.set(origin, seq);
    for _ in 0..rng.random_range(0..4) {
        vc.set(rng.random_range(0..8), rng.random_range(1..100_000));
    }
    vc.set(origin, seq);
    let kind = match rng.random_range(0..3) {
        0 => OpKind::Add { node: random_node(rng), parent: random_node(rng) },
        1 => OpKind::Remove { node: random_node(rng) },
        _ => OpKind::Move {
            node: random_node(rng),
            new_parent: random_node(rng),
            mtype: if rng.random_bool(0.5) { MoveType::Up } else { MoveType::Down },
            crit_anc: (0..rng.random_range(0..8)).map(|_| random_node(rng)).collect(),
            prio: Priority { num: vc.sum(), origin },
        },
    };
    Operation { id: OpId { origin, seq }, kind, vc }
}

#[test]
fn c10_codec_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bad = Vec::new();
    for _ in 0..CODEC_CASES {
        let op = random_op(&mut rng);
        let bytes = encode_op(&op);
        let back = decode_op(&bytes);
        let mut ok = back.as_ref() == Ok(&op) && back.map(|b| encode_op(&b)).as_deref() == Ok(&bytes[..]);
        if let OpKind::Move { crit_anc, .. } = &op.kind {
            // the same set built in another insertion order encodes identically
            let mut items: Vec<NodeId> = crit_anc.iter().copied().collect();
            items.shuffle(&mut rng);
            let mut shuffled = op.clone();
            if let OpKind::Move { crit_anc, .. } = &mut shuffled.kind {
                *crit_anc = items.into_iter().rev().collect::<BTreeSet<_>>();
            }
            ok &= encode_op(&shuffled) == bytes;
        }
        let hb = Message::Heartbeat(Heartbeat { origin: op.id.origin, vc: op.vc.clone() });
        ok &= decode_message(&encode_message(&hb)).as_ref() == Ok(&hb);
        if !ok && bad.len() < 3 {
            bad.push(format!("{op:?}"));
        }
    }
    let pass = bad.is_empty();
    report(10, "codec round trip", pass, &format!("{CODEC_CASES} operations, {} mismatches", bad.len()));
    assert!(pass, "{}", bad.join("\n"));
}
