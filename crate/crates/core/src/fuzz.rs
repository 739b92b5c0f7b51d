//! Randomized convergence fuzzing.
//!
//! Each seed drives a fleet of replicas through a random mix of commits,
//! merges and pulls over a simulated network with scheduled partitions,
//! then heals everything, runs an all-pairs state sync, and asserts that
//! every replica ends byte-identical. Structural invariants of the final
//! graph are re-checked with brute-force oracles.
//!
//! Seed sweeps are embarrassingly parallel; a rayon-based sweep is provided
//! behind the `parallel` feature (on by default) with a sequential fallback
//! that produces identical results.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dvcs::{CdvcsState, CommitGraph, CommitNode};
use crate::hash::{CommitId, Digest32};
use crate::peer::{Crdt, MessageBody, Peer, PeerError, PeerMessage, UpstreamCall};
use crate::simnet::{peer_action, LatencyBounds, Partition, SimConfig, SimError, SimNet};
use crate::store::MemStore;

const CRDT: &str = "db";
const BRANCH: &str = "main";
const OPS_START: u64 = 10;
const PARTITION_WINDOW: u64 = 25;

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub converged: bool,
    pub commits: usize,
    pub merges: usize,
    pub pulls: usize,
    pub partitions: usize,
    pub graph_size: usize,
    pub missing_ref_violations: u64,
    /// Digest of the converged state encoding (of replica 0 if diverged).
    pub state_digest: Digest32,
    /// Invariant oracle findings; empty when all hold.
    pub violations: Vec<String>,
    pub error: Option<String>,
    /// Full message trace, captured only for failing seeds.
    pub trace: Vec<String>,
}

impl SeedOutcome {
    pub fn ok(&self) -> bool {
        self.converged && self.violations.is_empty() && self.error.is_none()
            && self.missing_ref_violations == 0
    }
}

#[derive(Debug)]
pub struct FuzzSummary {
    pub outcomes: Vec<SeedOutcome>,
    pub failed_seeds: Vec<u64>,
}

impl FuzzSummary {
    pub fn all_ok(&self) -> bool {
        self.failed_seeds.is_empty()
    }
}

/// Brute-force reachability: walks parent edges from `from`.
pub fn reachable(graph: &CommitGraph, from: CommitId, to: CommitId) -> bool {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from];
    while let Some(n) = stack.pop() {
        if n == to {
            return true;
        }
        if !seen.insert(n) {
            continue;
        }
        if let Some(parents) = graph.parents(&n) {
            stack.extend(parents.iter().copied());
        }
    }
    false
}

/// Structural invariants checked by brute force: the graph is acyclic and
/// parent-closed, branch heads exist in the graph, and no head is an
/// ancestor of another head of the same branch.
pub fn check_invariants(state: &CdvcsState) -> Vec<String> {
    let mut violations = Vec::new();
    let graph = state.graph();
    if !graph.is_acyclic() {
        violations.push("graph has a cycle".to_string());
    }
    for (id, parents) in graph.iter() {
        for p in parents {
            if !graph.contains(p) {
                violations.push(format!("dangling parent {p:?} of {id:?}"));
            }
        }
    }
    for (branch, heads) in state.branches() {
        for h in heads {
            if !graph.contains(h) {
                violations.push(format!("head {h:?} of {branch} missing from graph"));
            }
        }
        for a in heads {
            for b in heads {
                if a != b && reachable(graph, *b, *a) {
                    violations.push(format!("head {a:?} of {branch} is an ancestor of head {b:?}"));
                }
            }
        }
    }
    violations
}

fn replica_name(i: usize) -> String {
    format!("replica-{i}")
}

/// Random bipartition schedule: each window opens a random cut with the
/// given probability.
fn partition_schedule(
    rng: &mut ChaCha8Rng,
    replicas: usize,
    horizon: u64,
    partition_prob: f64,
) -> Vec<Partition> {
    let mut partitions = Vec::new();
    let mut start = OPS_START;
    while start + PARTITION_WINDOW <= horizon {
        if rng.gen::<f64>() < partition_prob {
            let side_a: BTreeSet<String> = (0..replicas)
                .filter(|_| rng.gen_bool(0.5))
                .map(replica_name)
                .collect();
            if !side_a.is_empty() && side_a.len() < replicas {
                partitions.push(Partition { start, end: start + PARTITION_WINDOW, side_a });
            }
        }
        start += PARTITION_WINDOW;
    }
    partitions
}

/// One random operation against one replica. Expected datatype-level
/// refusals (a conflicted branch refusing a commit, a no-op pull) fall back
/// or skip; anything else is a real failure.
fn random_op(step_seed: u64, kind: u8) -> impl FnOnce(&mut Peer) -> Result<Vec<(String, PeerMessage)>, PeerError> + Send {
    move |peer: &mut Peer| {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let state = match peer.crdt(CRDT).and_then(Crdt::as_dvcs) {
            Some(s) => s.clone(),
            None => return Ok(Vec::new()),
        };
        let heads = state.heads(BRANCH).map(|h| h.clone()).unwrap_or_default();
        let do_merge = |peer: &mut Peer, rng: &mut ChaCha8Rng, heads: &BTreeSet<CommitId>| {
            let ordered: Vec<CommitId> = heads.iter().copied().collect();
            let payload = format!("merge {} {}", step_seed, rng.gen::<u32>());
            let r = peer.put_value(payload.as_bytes())?;
            match peer.local_upstream(CRDT, UpstreamCall::Merge {
                branch: BRANCH.into(),
                ordered_heads: ordered,
                txn_refs: vec![r],
                meta: Default::default(),
            }) {
                Ok((_, broadcast)) => Ok(broadcast),
                Err(PeerError::Dvcs(_)) => Ok(Vec::new()),
                Err(e) => Err(e),
            }
        };
        match kind {
            // commit; falls back to merge when the branch is conflicted
            0 => {
                if heads.len() > 1 {
                    return do_merge(peer, &mut rng, &heads);
                }
                let payload = format!("commit {}", step_seed);
                let r = peer.put_value(payload.as_bytes())?;
                match peer.local_upstream(CRDT, UpstreamCall::Commit {
                    branch: BRANCH.into(),
                    txn_refs: vec![r],
                    meta: Default::default(),
                }) {
                    Ok((_, broadcast)) => Ok(broadcast),
                    Err(PeerError::Dvcs(_)) => Ok(Vec::new()),
                    Err(e) => Err(e),
                }
            }
            // merge whatever conflict exists; no-op otherwise
            1 => {
                if heads.len() > 1 {
                    do_merge(peer, &mut rng, &heads)
                } else {
                    Ok(Vec::new())
                }
            }
            // pull a random locally known commit into the branch
            _ => {
                let ids: Vec<CommitId> = state.graph().iter().map(|(id, _)| *id).collect();
                if ids.is_empty() {
                    return Ok(Vec::new());
                }
                let target = ids[rng.gen_range(0..ids.len())];
                match peer.local_upstream(CRDT, UpstreamCall::Pull {
                    branch: BRANCH.into(),
                    remote_graph: state.graph().clone(),
                    remote_head: target,
                }) {
                    Ok((_, broadcast)) => Ok(broadcast),
                    Err(PeerError::Dvcs(_)) => Ok(Vec::new()),
                    Err(e) => Err(e),
                }
            }
        }
    }
}

/// Runs one fuzz seed to completion and reports the outcome.
pub fn fuzz_seed(replicas: usize, ops: usize, partition_prob: f64, seed: u64) -> SeedOutcome {
    match fuzz_seed_inner(replicas, ops, partition_prob, seed) {
        Ok(outcome) => outcome,
        Err(e) => SeedOutcome {
            seed,
            converged: false,
            commits: 0,
            merges: 0,
            pulls: 0,
            partitions: 0,
            graph_size: 0,
            missing_ref_violations: 0,
            state_digest: Digest32::of(b""),
            violations: Vec::new(),
            error: Some(e.to_string()),
            trace: Vec::new(),
        },
    }
}

fn fuzz_seed_inner(
    replicas: usize,
    ops: usize,
    partition_prob: f64,
    seed: u64,
) -> Result<SeedOutcome, SimError> {
    let replicas = replicas.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = OPS_START + ops as u64;
    let partitions = partition_schedule(&mut rng, replicas, horizon, partition_prob);
    let n_partitions = partitions.len();
    let mut net = SimNet::new(SimConfig {
        seed: seed.wrapping_add(1),
        latency: LatencyBounds { min: 1, max: 3 },
        drop_prob: 0.0,
        partitions,
    })?;

    let root_node = CommitNode::root();
    let names: Vec<String> = (0..replicas).map(replica_name).collect();
    for n in &names {
        let mut p = Peer::new(n.clone(), Box::new(MemStore::new()));
        p.create_dvcs(CRDT, &root_node, BRANCH)?;
        net.add_peer(p);
    }
    for i in 0..replicas {
        for j in (i + 1)..replicas {
            net.connect(&names[i], &names[j])?;
        }
    }

    let (mut commits, mut merges, mut pulls) = (0usize, 0usize, 0usize);
    for i in 0..ops {
        let peer = &names[rng.gen_range(0..replicas)];
        let roll = rng.gen::<f64>();
        let kind = if roll < 0.70 {
            commits += 1;
            0u8
        } else if roll < 0.85 {
            merges += 1;
            1u8
        } else {
            pulls += 1;
            2u8
        };
        let step_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        net.schedule_action(OPS_START + i as u64, peer_action(peer, random_op(step_seed, kind)));
    }

    let budget = horizon + 1_000_000;
    net.run_until_quiescent(budget)?;

    // final heal is implicit (all partitions have ended); the all-pairs
    // state sync below reconciles anything gossip lost to partitions
    for a in &names {
        for b in &names {
            if a != b {
                let msg = PeerMessage {
                    crdt_id: CRDT.to_string(),
                    origin: a.clone(),
                    body: MessageBody::StateSyncRequest,
                };
                net.schedule(a, b, msg)?;
            }
        }
    }
    net.run_until_quiescent(budget + 1_000_000)?;

    let converged = net.converged(CRDT);
    let first = net.peer(&names[0]).unwrap();
    let state = first.crdt(CRDT).unwrap().as_dvcs().unwrap();
    let graph_size = state.graph().len();
    let mut violations = Vec::new();
    if graph_size <= 512 {
        for n in &names {
            let s = net.peer(n).unwrap().crdt(CRDT).unwrap().as_dvcs().unwrap();
            violations.extend(check_invariants(s));
        }
    } else {
        violations.extend(check_invariants(state));
    }
    let missing_ref_violations =
        net.peers().map(|(_, p)| p.stats.missing_ref_violations).sum();
    let state_digest = Digest32::of(&first.crdt(CRDT).unwrap().encode());
    let failed = !converged || !violations.is_empty() || missing_ref_violations > 0;
    let trace = if failed { net.trace_lines() } else { Vec::new() };
    Ok(SeedOutcome {
        seed,
        converged,
        commits,
        merges,
        pulls,
        partitions: n_partitions,
        graph_size,
        missing_ref_violations,
        state_digest,
        violations,
        error: None,
        trace,
    })
}

/// Sequential seed sweep.
pub fn sweep_sequential(replicas: usize, ops: usize, seeds: &[u64], partition_prob: f64) -> FuzzSummary {
    let outcomes: Vec<SeedOutcome> =
        seeds.iter().map(|&s| fuzz_seed(replicas, ops, partition_prob, s)).collect();
    summarize(outcomes)
}

/// Data-parallel seed sweep over the rayon thread pool. Yields the same
/// outcomes in the same order as the sequential sweep.
#[cfg(feature = "parallel")]
pub fn sweep_parallel(replicas: usize, ops: usize, seeds: &[u64], partition_prob: f64) -> FuzzSummary {
    use rayon::prelude::*;
    let outcomes: Vec<SeedOutcome> =
        seeds.par_iter().map(|&s| fuzz_seed(replicas, ops, partition_prob, s)).collect();
    summarize(outcomes)
}

/// Default sweep: parallel when the `parallel` feature is enabled.
pub fn fuzz_converge(replicas: usize, ops: usize, seeds: &[u64], partition_prob: f64) -> FuzzSummary {
    #[cfg(feature = "parallel")]
    {
        sweep_parallel(replicas, ops, seeds, partition_prob)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sweep_sequential(replicas, ops, seeds, partition_prob)
    }
}

fn summarize(outcomes: Vec<SeedOutcome>) -> FuzzSummary {
    let failed_seeds = outcomes.iter().filter(|o| !o.ok()).map(|o| o.seed).collect();
    FuzzSummary { outcomes, failed_seeds }
}
