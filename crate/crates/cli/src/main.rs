use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use maram::baselines::{NaiveReplica, UdrReplica};
use maram::check::fuzz::{self, FuzzAlgorithm, FuzzPlan};
use maram::check::{run_checks, Scope};
use maram::crdt::codec::read_log;
use maram::crdt::MaramReplica;
use maram::sim::{export_metrics, run_simulation, summary_table, SimConfig};
use maram::{AbstractionMode, Replica, ReplicaId, TreeState};

/// Replicated tree with coordination-free moves: simulations, checks and log replay.
#[derive(Parser, Debug)]
#[command(name = "maram", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the simulations described by a JSON config and export CSVs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Where to write the CSVs; defaults to the config's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long, env = "MARAM_SEED")]
        seed: Option<u64>,
    },
    /// Run the exhaustive property suites.
    Check {
        #[arg(default_value = "all")]
        scope: Scope,
        /// Largest tree size, root included.
        #[arg(long)]
        bound: Option<usize>,
    },
    /// Run random workloads under random delivery schedules.
    Fuzz(FuzzArgs),
    /// Feed an operation log (or a fuzz trace) through fresh replicas.
    Replay {
        /// JSON-lines operation log.
        #[arg(required_unless_present = "trace", conflicts_with = "trace")]
        oplog: Option<PathBuf>,
        /// Fuzz trace written by `fuzz`.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "maram")]
        algorithm: FuzzAlgorithm,
    },
}

#[derive(Args, Debug)]
struct FuzzArgs {
    #[arg(long, default_value_t = 100)]
    schedules: usize,
    #[arg(long, env = "MARAM_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    replicas: u32,
    /// Operations per schedule: a count or an inclusive range like 60-250.
    #[arg(long, default_value = "60-250", value_parser = parse_range)]
    ops: RangeInclusive<usize>,
    /// Comma-separated fractions of moves issued as crossing pairs.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.02, 0.1, 0.2])]
    conflict_rates: Vec<f64>,
    #[arg(long, default_value = "maram")]
    algorithm: FuzzAlgorithm,
    /// Succeed only if some schedule fails (for the naive baseline).
    #[arg(long)]
    expect_unsafe: bool,
    /// Where to write the shrunk trace of the first failure.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let r = match s.split_once('-') {
        Some((a, b)) => parse(a)?..=parse(b)?,
        None => parse(s)?..=parse(s)?,
    };
    if r.is_empty() || *r.start() == 0 {
        return Err(format!("empty op range {s:?}"));
    }
    Ok(r)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out_dir, seed } => simulate(&config, out_dir, seed),
        Command::Check { scope, bound } => check(scope, bound),
        Command::Fuzz(args) => run_fuzz(args),
        Command::Replay { oplog: Some(path), algorithm, .. } => replay_log(&path, algorithm),
        Command::Replay { trace: Some(path), .. } => replay_fuzz_trace(&path),
        Command::Replay { .. } => unreachable!("clap requires a log or a trace"),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn simulate(config: &Path, out_dir: Option<PathBuf>, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = SimConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let runs = run_simulation(&cfg)?;
    let dir = out_dir.unwrap_or_else(|| config.parent().map(Path::to_path_buf).unwrap_or_default());
    let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("sim");
    export_metrics(&runs, &dir, stem)?;
    print!("{}", summary_table(&runs));
    println!("wrote {}", dir.join(format!("{stem}_{{ops,aggregate}}.csv")).display());
    let bad = runs.iter().filter(|m| !m.converged).count();
    if bad > 0 {
        println!("{bad} run(s) did not converge");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn check(scope: Scope, bound: Option<usize>) -> Result<ExitCode> {
    let reports = run_checks(scope, bound);
    for r in &reports {
        print!("{r}");
    }
    Ok(if reports.iter().all(|r| r.passed()) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run_fuzz(args: FuzzArgs) -> Result<ExitCode> {
    if args.replicas < 2 {
        bail!("fuzzing needs at least 2 replicas");
    }
    let plan = FuzzPlan {
        algorithm: args.algorithm,
        schedules: args.schedules,
        seed: args.seed,
        replicas: args.replicas,
        ops: args.ops,
        conflict_rates: args.conflict_rates,
    };
    let summary = fuzz::fuzz_many(&plan);
    println!(
        "{} schedules, {} operations, {} stable rechecks, {} failing",
        summary.schedules,
        summary.operations,
        summary.stable_checked,
        summary.failures.len()
    );
    let Some(first) = summary.failures.first() else {
        if args.expect_unsafe {
            println!("expected violations, found none");
            return Ok(ExitCode::FAILURE);
        }
        return Ok(ExitCode::SUCCESS);
    };
    let mut labels = BTreeSet::new();
    for f in &summary.failures {
        labels.extend(f.violations.iter().map(|v| v.label()));
    }
    println!("violation kinds: {}", labels.into_iter().collect::<Vec<_>>().join(", "));
    if args.expect_unsafe {
        println!("first failing seed {}: {}", first.config.seed, first.violations[0]);
        return Ok(ExitCode::SUCCESS);
    }
    let small = fuzz::shrink(first);
    let path = args.trace.unwrap_or_else(|| PathBuf::from(format!("maram-fuzz-{}.trace", first.config.seed)));
    let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    small.write_trace(&mut out)?;
    out.flush()?;
    println!("seed {} fails: {}", first.config.seed, first.violations[0]);
    println!("shrunk to {} actions ({} ops): {}", small.actions.len(), small.config.ops, small.violations[0]);
    println!("trace written to {}; rerun with `maram replay --trace {}`", path.display(), path.display());
    Ok(ExitCode::FAILURE)
}

fn replay_fuzz_trace(path: &Path) -> Result<ExitCode> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (cfg, actions) = fuzz::read_trace(BufReader::new(file)).map_err(anyhow::Error::msg)?;
    let outcome = fuzz::replay_trace(cfg, &actions);
    println!("{} actions, seed {}, {:?}", actions.len(), cfg.seed, cfg.algorithm);
    for v in &outcome.violations {
        println!("{v}");
    }
    Ok(if outcome.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn replay_log(path: &Path, algorithm: FuzzAlgorithm) -> Result<ExitCode> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let msgs = read_log(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))?;
    // a bystander replica that generated nothing receives the whole log
    let origins: BTreeSet<ReplicaId> = msgs.iter().map(|m| m.origin()).collect();
    let observer = origins.last().map_or(0, |o| o + 1);
    let peers: Vec<ReplicaId> = origins.iter().copied().chain([observer]).collect();
    let mut replica: Box<dyn Replica> = match algorithm {
        FuzzAlgorithm::Maram => Box::new(MaramReplica::new(observer, peers)),
        FuzzAlgorithm::Udr => Box::new(UdrReplica::new(observer, peers)),
        FuzzAlgorithm::Naive => Box::new(NaiveReplica::new(observer, peers)),
    };
    for m in msgs {
        replica.receive(m);
    }
    let state = replica.state();
    print_tree(state);
    println!("delivered: {}", replica.delivered());
    let report = state.check_invariant();
    println!("invariant: {report}");
    if replica.buffered() > 0 {
        println!("undeliverable operations remain: {}", replica.buffered());
        return Ok(ExitCode::FAILURE);
    }
    Ok(if report.all_ok() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn print_tree(state: &TreeState) {
    println!("keeping view:");
    print!("{}", state.render());
    let names = |mode| state.abstract_view(mode).iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
    println!("keeping nodes: {}", names(AbstractionMode::Keeping));
    println!("skipping nodes: {}", names(AbstractionMode::Skipping));
}
