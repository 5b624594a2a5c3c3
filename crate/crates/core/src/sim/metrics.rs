use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::config::Algorithm;
use super::SimError;
use crate::tree::{MoveType, ReplicaId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Applied,
    Skipped,
    Aborted,
}

impl RecordStatus {
    pub fn name(self) -> &'static str {
        match self {
            RecordStatus::Applied => "applied",
            RecordStatus::Skipped => "skipped",
            RecordStatus::Aborted => "aborted",
        }
    }
}

/// One client request of the concurrent phase, seen from its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub run: usize,
    /// `origin:seq` of the effector, or `origin:-slot` for an aborted
    /// lock-mode move that never produced one.
    pub op_id: String,
    pub origin: ReplicaId,
    pub kind: &'static str,
    pub mtype: Option<MoveType>,
    pub submit_us: u64,
    pub ack_us: u64,
    pub stable_us: u64,
    pub status: RecordStatus,
}

impl OpRecord {
    pub fn response_us(&self) -> u64 {
        self.ack_us - self.submit_us
    }

    pub fn stabilization_us(&self) -> u64 {
        self.stable_us - self.ack_us
    }

    pub fn is_move(&self) -> bool {
        self.mtype.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub conflict_rate: f64,
    pub latency_preset: String,
    pub records: Vec<OpRecord>,
    /// Replica/event pairs after which the touched replica failed the tree invariant.
    pub invariant_violations: u64,
    pub targeted_moves: usize,
    /// Concurrent move pairs whose shipped critical-ancestor sets overlap.
    pub overlapping_pairs: usize,
    pub converged: bool,
    /// Effectors delivered per replica, warm-up excluded.
    pub delivered: Vec<usize>,
    /// Longest time any lock request waited at the manager.
    pub max_lock_wait_us: u64,
    pub messages: u64,
    /// Mean encoded size of an effector on the wire.
    pub metadata_bytes_per_op: f64,
    /// Log steps undone and redone across all replicas.
    pub redo_steps: u64,
    pub end_us: u64,
}

fn ms(us: u64) -> f64 {
    us as f64 / 1000.0
}

fn mean(xs: impl Iterator<Item = u64>) -> f64 {
    let (sum, n) = xs.fold((0u128, 0u64), |(s, n), x| (s + x as u128, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64 / 1000.0
    }
}

/// Nearest-rank quantile in milliseconds.
fn quantile(mut xs: Vec<u64>, q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_unstable();
    let rank = ((q * xs.len() as f64).ceil() as usize).clamp(1, xs.len());
    ms(xs[rank - 1])
}

impl RunMetrics {
    pub fn aborts(&self) -> usize {
        self.records.iter().filter(|r| r.status == RecordStatus::Aborted).count()
    }

    pub fn mean_response_ms(&self) -> f64 {
        mean(self.records.iter().map(OpRecord::response_us))
    }

    pub fn p99_response_ms(&self) -> f64 {
        quantile(self.records.iter().map(OpRecord::response_us).collect(), 0.99)
    }

    pub fn median_response_ms(&self) -> f64 {
        quantile(self.records.iter().map(OpRecord::response_us).collect(), 0.5)
    }

    pub fn mean_stabilization_ms(&self) -> f64 {
        mean(self.records.iter().map(OpRecord::stabilization_us))
    }

    pub fn median_stabilization_ms(&self) -> f64 {
        quantile(self.records.iter().map(OpRecord::stabilization_us).collect(), 0.5)
    }

    /// Mean response of move requests, optionally for one origin only.
    pub fn mean_move_response_ms(&self, origin: Option<ReplicaId>) -> f64 {
        mean(
            self.records
                .iter()
                .filter(|r| r.is_move() && origin.is_none_or(|o| r.origin == o))
                .map(OpRecord::response_us),
        )
    }

    pub fn mean_stabilization_where(&self, pred: impl Fn(&OpRecord) -> bool) -> f64 {
        mean(self.records.iter().filter(|r| pred(r)).map(OpRecord::stabilization_us))
    }
}

pub const OP_HEADER: &str = "run,op_id,origin,kind,mtype,submit_ms,ack_ms,stable_ms,status";
pub const AGGREGATE_HEADER: &str =
    "run,algorithm,conflict_rate,latency_preset,mean_resp_ms,p99_resp_ms,mean_stab_ms,aborts,invariant_violations";

pub fn write_op_csv<W: Write>(out: W, runs: &[RunMetrics]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(OP_HEADER.split(','))?;
    for m in runs {
        for r in &m.records {
            w.write_record([
                r.run.to_string(),
                r.op_id.clone(),
                r.origin.to_string(),
                r.kind.to_string(),
                r.mtype.map_or("", |t| if t == MoveType::Up { "up" } else { "down" }).to_string(),
                format!("{:.3}", ms(r.submit_us)),
                format!("{:.3}", ms(r.ack_us)),
                format!("{:.3}", ms(r.stable_us)),
                r.status.name().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(out: W, runs: &[RunMetrics]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_HEADER.split(','))?;
    for m in runs {
        w.write_record([
            m.run.to_string(),
            m.algorithm.name().to_string(),
            m.conflict_rate.to_string(),
            m.latency_preset.clone(),
            format!("{:.3}", m.mean_response_ms()),
            format!("{:.3}", m.p99_response_ms()),
            format!("{:.3}", m.mean_stabilization_ms()),
            m.aborts().to_string(),
            m.invariant_violations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<stem>_ops.csv` and `<stem>_aggregate.csv` into `dir`.
pub fn export_metrics(runs: &[RunMetrics], dir: &Path, stem: &str) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    write_op_csv(std::fs::File::create(dir.join(format!("{stem}_ops.csv")))?, runs)?;
    write_aggregate_csv(std::fs::File::create(dir.join(format!("{stem}_aggregate.csv")))?, runs)?;
    Ok(())
}

pub fn summary_table(runs: &[RunMetrics]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>4} {:<13} {:>6} {:<9} {:>10} {:>10} {:>10} {:>10} {:>7} {:>6} {:>9}",
        "run", "algorithm", "rate", "latency", "resp_ms", "p99_ms", "move_ms", "stab_ms", "aborts", "viol", "converged"
    );
    for m in runs {
        let _ = writeln!(
            s,
            "{:>4} {:<13} {:>6} {:<9} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>7} {:>6} {:>9}",
            m.run,
            m.algorithm.name(),
            m.conflict_rate,
            m.latency_preset,
            m.mean_response_ms(),
            m.p99_response_ms(),
            m.mean_move_response_ms(None),
            m.mean_stabilization_ms(),
            m.aborts(),
            m.invariant_violations,
            m.converged
        );
    }
    let one_setup = runs.windows(2).all(|w| {
        w[0].algorithm == w[1].algorithm
            && w[0].conflict_rate == w[1].conflict_rate
            && w[0].latency_preset == w[1].latency_preset
    });
    if runs.len() > 1 && one_setup {
        let n = runs.len() as f64;
        let avg = |f: &dyn Fn(&RunMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let _ = writeln!(
            s,
            "{:>4} {:<13} {:>6} {:<9} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>7.1} {:>6.1} {:>9}",
            "mean",
            runs[0].algorithm.name(),
            runs[0].conflict_rate,
            runs[0].latency_preset,
            avg(&|m| m.mean_response_ms()),
            avg(&|m| m.p99_response_ms()),
            avg(&|m| m.mean_move_response_ms(None)),
            avg(&|m| m.mean_stabilization_ms()),
            avg(&|m| m.aborts() as f64),
            avg(&|m| m.invariant_violations as f64),
            runs.iter().all(|m| m.converged)
        );
    }
    s
}
