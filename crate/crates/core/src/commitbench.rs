//! Commit-throughput measurement.
//!
//! Drives a long run of single-branch commits through a peer backed by a
//! file store with graph persistence enabled, recording per-commit latency,
//! the number of graph buckets rewritten, and the graph size. Healthy
//! behavior is flat: per-commit cost must not grow with history length, and
//! each commit may only touch the one or two buckets its delta lands in.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::dvcs::CommitNode;
use crate::peer::{Peer, PeerError, UpstreamCall};
use crate::store::FileStore;

#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub commit_index: usize,
    pub latency_us: u64,
    pub touched_buckets: usize,
    pub graph_size: usize,
}

#[derive(Debug)]
pub struct BenchSummary {
    pub records: Vec<BenchRecord>,
    /// Median commit latency per decile of the run, in microseconds.
    pub decile_medians_us: Vec<u64>,
    /// Largest bucket count touched by any commit after the first hundred.
    pub max_touched_after_warmup: usize,
}

impl BenchSummary {
    /// Ratio of the last decile's median latency to the first's.
    pub fn last_to_first_ratio(&self) -> f64 {
        let first = *self.decile_medians_us.first().unwrap_or(&1) as f64;
        let last = *self.decile_medians_us.last().unwrap_or(&1) as f64;
        last / first.max(1.0)
    }
}

fn median(mut xs: Vec<u64>) -> u64 {
    if xs.is_empty() {
        return 0;
    }
    let mid = xs.len() / 2;
    *xs.select_nth_unstable(mid).1
}

fn summarize(records: Vec<BenchRecord>) -> BenchSummary {
    let n = records.len();
    let decile = (n / 10).max(1);
    let decile_medians_us = records
        .chunks(decile)
        .take(10)
        .map(|c| median(c.iter().map(|r| r.latency_us).collect()))
        .collect();
    let max_touched_after_warmup = records
        .iter()
        .skip(100.min(n))
        .map(|r| r.touched_buckets)
        .max()
        .unwrap_or(0);
    BenchSummary { records, decile_medians_us, max_touched_after_warmup }
}

fn csv_row(out: &mut dyn std::io::Write, r: &BenchRecord) -> std::io::Result<()> {
    writeln!(out, "{},{},{},{}", r.commit_index, r.latency_us, r.touched_buckets, r.graph_size)
}

/// Runs `n` sequential commits against a fresh file-store-backed peer in
/// `dir`, with graph persistence on every commit.
pub fn bench_commit(n: usize, dir: &Path) -> Result<BenchSummary, PeerError> {
    bench_commit_impl(n, dir, &mut |_| Ok(()))
}

/// Like [`bench_commit`], but streams one CSV row per commit to `out` as it
/// is measured, so an abort mid-run still leaves the rows completed so far.
pub fn bench_commit_csv(
    n: usize,
    dir: &Path,
    out: &mut dyn std::io::Write,
) -> Result<BenchSummary, PeerError> {
    writeln!(out, "commit_index,latency_us,touched_buckets,graph_size")
        .map_err(crate::store::StoreError::from)?;
    let result = bench_commit_impl(n, dir, &mut |r| csv_row(out, r));
    out.flush().map_err(crate::store::StoreError::from)?;
    result
}

fn bench_commit_impl(
    n: usize,
    dir: &Path,
    sink: &mut dyn FnMut(&BenchRecord) -> std::io::Result<()>,
) -> Result<BenchSummary, PeerError> {
    let store = FileStore::open(dir)?;
    let mut peer = Peer::new("bench", Box::new(store)).with_graph_persistence();
    peer.create_dvcs("db", &CommitNode::root(), "main")?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let started = Instant::now();
        let payload = (i as u64).to_be_bytes();
        let r = peer.put_value(&payload)?;
        peer.local_upstream(
            "db",
            UpstreamCall::Commit { branch: "main".into(), txn_refs: vec![r], meta: BTreeMap::new() },
        )?;
        let latency_us = started.elapsed().as_micros() as u64;
        let graph_size = peer
            .crdt("db")
            .and_then(|c| c.as_dvcs())
            .map(|s| s.graph().len())
            .unwrap_or(0);
        let record = BenchRecord {
            commit_index: i,
            latency_us,
            touched_buckets: peer.stats.last_touched_buckets,
            graph_size,
        };
        sink(&record).map_err(crate::store::StoreError::from)?;
        records.push(record);
    }
    Ok(summarize(records))
}

/// Writes records as CSV: `commit_index,latency_us,touched_buckets,graph_size`.
pub fn write_csv(records: &[BenchRecord], out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "commit_index,latency_us,touched_buckets,graph_size")?;
    for r in records {
        csv_row(out, r)?;
    }
    Ok(())
}
