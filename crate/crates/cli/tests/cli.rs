use std::path::Path;
use std::process::{Command, Output};

use maram::crdt::codec::write_log;
use maram::crdt::{MaramReplica, Message, OpKind, OpRequest, Operation};
use maram::NodeId;

fn maram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maram")).args(args).env_remove("MARAM_SEED").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn added(op: &Operation) -> NodeId {
    match op.kind {
        OpKind::Add { node, .. } => node,
        _ => panic!("not an add"),
    }
}

/// Replica 2 builds root -> {a, b}; replica 0 moves a under b while replica 1
/// moves b under a.
fn two_move_log() -> (Vec<Message>, NodeId, NodeId) {
    let mut builder = MaramReplica::new(2, [0, 1, 2]);
    let add_a = builder.generate_op(OpRequest::Add { parent: NodeId::Root }).unwrap();
    let add_b = builder.generate_op(OpRequest::Add { parent: NodeId::Root }).unwrap();
    let (a, b) = (added(&add_a), added(&add_b));
    let mut r0 = MaramReplica::new(0, [0, 1, 2]);
    let mut r1 = MaramReplica::new(1, [0, 1, 2]);
    for r in [&mut r0, &mut r1] {
        r.deliver(Message::Op(add_a.clone()));
        r.deliver(Message::Op(add_b.clone()));
    }
    let ab = r0.generate_op(OpRequest::Move { node: a, new_parent: b }).unwrap();
    let ba = r1.generate_op(OpRequest::Move { node: b, new_parent: a }).unwrap();
    (vec![Message::Op(add_a), Message::Op(add_b), Message::Op(ab), Message::Op(ba)], a, b)
}

fn write_msgs(path: &Path, msgs: &[Message]) {
    write_log(std::fs::File::create(path).unwrap(), msgs).unwrap();
}

#[test]
fn replay_two_move_scenario_keeps_one_winner() {
    let dir = tempfile::tempdir().unwrap();
    let (msgs, a, b) = two_move_log();
    let log = dir.path().join("two.log");
    write_msgs(&log, &msgs);
    for alg in ["maram", "udr"] {
        let o = maram(&["replay", log.to_str().unwrap(), "--algorithm", alg]);
        assert!(o.status.success(), "{alg}: {}", stdout(&o));
        let text = stdout(&o);
        assert!(text.contains("reachable: ok"), "{text}");
        let a_under_b = text.contains(&format!("  {b}\n    {a}\n"));
        let b_under_a = text.contains(&format!("  {a}\n    {b}\n"));
        assert!(a_under_b ^ b_under_a, "{alg}: {text}");
    }
}

#[test]
fn replay_empty_log_prints_root() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("empty.log");
    std::fs::write(&log, "").unwrap();
    let o = maram(&["replay", log.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("keeping view:\nroot\n"), "{}", stdout(&o));
}

#[test]
fn replay_gapped_log_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (mut msgs, _, _) = two_move_log();
    msgs.remove(0);
    let log = dir.path().join("gap.log");
    write_msgs(&log, &msgs);
    let o = maram(&["replay", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("undeliverable operations remain"), "{}", stdout(&o));
}

#[test]
fn replay_malformed_log_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("bad.log");
    std::fs::write(&log, "{not json\n").unwrap();
    assert_eq!(maram(&["replay", log.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(maram(&["replay", "/nonexistent/log"]).status.code(), Some(2));
}

#[test]
fn check_small_bound_passes() {
    let o = maram(&["check", "seq", "--bound", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("PASS sequential safety"), "{}", stdout(&o));
    let o = maram(&["check", "commute", "--bound", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("pairs tested: "), "{}", stdout(&o));
}

#[test]
fn unknown_scope_and_subcommand_exit_2() {
    assert_eq!(maram(&["check", "everything"]).status.code(), Some(2));
    assert_eq!(maram(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(maram(&[]).status.code(), Some(2));
}

#[test]
fn simulate_writes_csvs_beside_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(
        &cfg,
        r#"{"algorithm": "maram", "warmup_nodes": 40, "ops_per_replica": 20, "conflict_rate": 20, "runs": 2}"#,
    )
    .unwrap();
    let o = maram(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\nmean maram"), "{}", stdout(&o));
    let ops = std::fs::read_to_string(dir.path().join("small_ops.csv")).unwrap();
    assert!(ops.starts_with("run,op_id,origin,kind,mtype"));
    assert_eq!(ops.lines().count(), 1 + 2 * 3 * 20);
    let agg = std::fs::read_to_string(dir.path().join("small_aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 3);
}

#[test]
fn simulate_seed_override_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.json");
    std::fs::write(&cfg, r#"{"algorithm": "udr", "warmup_nodes": 30, "ops_per_replica": 15, "runs": 1}"#).unwrap();
    let run = |seed: &str, out: &str| {
        let out_dir = dir.path().join(out);
        let o = Command::new(env!("CARGO_BIN_EXE_maram"))
            .args(["simulate", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()])
            .env("MARAM_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read_to_string(out_dir.join("s_ops.csv")).unwrap()
    };
    assert_eq!(run("7", "a"), run("7", "b"));
    assert_ne!(run("7", "a"), run("8", "c"));
}

#[test]
fn simulate_bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ \"algorithm\": ").unwrap();
    let o = maram(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config-invalid"));
    std::fs::write(&cfg, r#"{"algorithm": "maram", "replicas": 0}"#).unwrap();
    assert_eq!(maram(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn fuzz_maram_passes() {
    let o = maram(&["fuzz", "--schedules", "20", "--ops", "60", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failing"));
}

#[test]
fn fuzz_naive_expect_unsafe() {
    let o = maram(&["fuzz", "--schedules", "20", "--ops", "60", "--algorithm", "naive", "--expect-unsafe"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("violation kinds: invariant"), "{}", stdout(&o));
    let o = maram(&["fuzz", "--schedules", "5", "--ops", "30", "--conflict-rates", "0", "--expect-unsafe"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fuzz_failure_trace_replays() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("fail.trace");
    let o = maram(&[
        "fuzz",
        "--schedules",
        "20",
        "--ops",
        "60",
        "--algorithm",
        "naive",
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    let shrunk = stdout(&o).lines().find(|l| l.starts_with("shrunk to")).unwrap().to_string();
    let violation = shrunk.split_once("): ").unwrap().1.to_string();
    let first = maram(&["replay", "--trace", trace.to_str().unwrap()]);
    let again = maram(&["replay", "--trace", trace.to_str().unwrap()]);
    assert_eq!(first.status.code(), Some(1));
    assert_eq!(stdout(&first), stdout(&again));
    assert!(stdout(&first).contains(&violation), "{}\n{violation}", stdout(&first));
}
