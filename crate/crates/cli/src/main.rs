//! Command-line runner for the replicated commit-graph toolkit: scripted
//! collaboration scenarios, the commit-throughput benchmark, and the
//! randomized convergence fuzzer.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use confluence::commitbench;
use confluence::fuzz;
use confluence::scenarios;

#[derive(Parser)]
#[command(name = "confluence", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scripted collaboration scenario and print its report as JSON
    Scenario {
        #[arg(value_enum)]
        which: Which,
        /// Simulation seed (latency sampling)
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Booking: number of slots available
        #[arg(long, default_value_t = 1)]
        capacity: usize,
        /// Booking: number of concurrently booking clients
        #[arg(long, default_value_t = 2)]
        clients: usize,
        /// Single-writer: number of replicas in the gossip chain
        #[arg(long, default_value_t = 4)]
        replicas: usize,
        /// Single-writer: number of commits issued by the writer
        #[arg(long, default_value_t = 50)]
        commits: usize,
        /// Also write the JSON report to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Performance measurements
    Bench {
        #[command(subcommand)]
        what: BenchCmd,
    },
    /// Randomized convergence fuzzing across seeds
    Fuzz {
        #[arg(long, default_value_t = 5)]
        replicas: usize,
        /// Random operations per seed (70% commit, 15% merge, 15% pull)
        #[arg(long, default_value_t = 1000)]
        ops: usize,
        /// Number of seeds to sweep (0..seeds)
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Probability of opening a network partition per schedule window
        #[arg(long, default_value_t = 0.2)]
        partition_prob: f64,
        /// Run the sweep on one thread instead of the rayon pool
        #[arg(long)]
        sequential: bool,
        /// Directory for message traces of failing seeds
        #[arg(long, default_value = ".")]
        trace_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Sequential commits against a file-backed store with graph persistence,
    /// one CSV row per commit
    Commit {
        /// Number of commits
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        /// CSV output path
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum Which {
    Calendar,
    SingleWriter,
    Booking,
}

#[allow(clippy::too_many_arguments)]
fn run_scenario(
    which: Which,
    seed: u64,
    capacity: usize,
    clients: usize,
    replicas: usize,
    commits: usize,
    out: Option<&PathBuf>,
) -> anyhow::Result<bool> {
    let report = match which {
        Which::Calendar => scenarios::scenario_calendar(seed)?,
        Which::SingleWriter => scenarios::scenario_single_writer(replicas, commits, seed)?,
        Which::Booking => scenarios::scenario_booking(capacity, clients, seed)?,
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, json.as_bytes())
            .with_context(|| format!("writing report to {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(report.passed)
}

fn run_fuzz(
    replicas: usize,
    ops: usize,
    seeds: u64,
    partition_prob: f64,
    sequential: bool,
    trace_dir: &PathBuf,
) -> anyhow::Result<bool> {
    let seed_list: Vec<u64> = (0..seeds).collect();
    let summary = if sequential {
        fuzz::sweep_sequential(replicas, ops, &seed_list, partition_prob)
    } else {
        fuzz::fuzz_converge(replicas, ops, &seed_list, partition_prob)
    };
    for o in &summary.outcomes {
        println!(
            "seed {:>4}  converged={}  graph={:>5}  commits={:>4} merges={:>4} pulls={:>4}  \
             partitions={:>2}  state={}",
            o.seed,
            o.converged,
            o.graph_size,
            o.commits,
            o.merges,
            o.pulls,
            o.partitions,
            o.state_digest
        );
        if let Some(e) = &o.error {
            println!("seed {:>4}  error: {e}", o.seed);
        }
        for v in &o.violations {
            println!("seed {:>4}  invariant violation: {v}", o.seed);
        }
        if !o.trace.is_empty() {
            let path = trace_dir.join(format!("fuzz-seed-{}.trace", o.seed));
            std::fs::write(&path, o.trace.join("\n"))
                .with_context(|| format!("writing trace to {}", path.display()))?;
            println!("seed {:>4}  trace: {}", o.seed, path.display());
        }
    }
    if summary.all_ok() {
        println!("all {} seeds converged", summary.outcomes.len());
        Ok(true)
    } else {
        println!("FAILED seeds: {:?}", summary.failed_seeds);
        Ok(false)
    }
}

fn run_bench_commit(n: usize, out: &PathBuf) -> anyhow::Result<bool> {
    let dir = tempfile::tempdir().context("creating scratch store directory")?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut writer = BufWriter::new(file);
    // rows stream to the CSV as they are measured, so an aborted run still
    // leaves the completed prefix on disk
    let summary = commitbench::bench_commit_csv(n, dir.path(), &mut writer)?;
    writer.flush()?;
    println!(
        "{} commits  decile medians (us): {:?}  last/first: {:.2}  max buckets touched after warmup: {}",
        n, summary.decile_medians_us, summary.last_to_first_ratio(), summary.max_touched_after_warmup
    );
    println!("wrote {}", out.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Scenario { which, seed, capacity, clients, replicas, commits, out } => {
            println!("seed: {seed}");
            run_scenario(which, seed, capacity, clients, replicas, commits, out.as_ref())
        }
        Cmd::Fuzz { replicas, ops, seeds, partition_prob, sequential, trace_dir } => {
            run_fuzz(replicas, ops, seeds, partition_prob, sequential, &trace_dir)
        }
        Cmd::Bench { what: BenchCmd::Commit { n, out } } => run_bench_commit(n, &out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
