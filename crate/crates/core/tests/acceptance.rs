//! Acceptance suite: one test per release criterion, each printing a single
//! PASS/FAIL verdict line. Derived algorithms (ancestor search, head
//! normalization) are checked against brute-force oracles with zero
//! tolerance; randomized checks use fixed seeds and are fully deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use confluence::commitbench::bench_commit;
use confluence::dvcs::{
    is_ancestor, lca, remove_ancestors, CdvcsState, CommitGraph, CommitNode, DvcsError,
};
use confluence::fuzz::{fuzz_converge, fuzz_seed};
use confluence::hash::{CommitId, Digest32};
use confluence::orset::OrSetState;
use confluence::scenarios::{scenario_booking, scenario_calendar};
use confluence::store::{FileStore, StoreError, ValueStore};

fn verdict(criterion: u32, name: &str, pass: bool, detail: String) {
    println!(
        "[{}] criterion {}: {} — {}",
        if pass { "PASS" } else { "FAIL" },
        criterion,
        name,
        detail
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------------------
// criterion 1: convergence under partitions

#[test]
fn criterion_1_convergence_fuzz() {
    let started = Instant::now();
    let seeds: Vec<u64> = (0..100).collect();
    let summary = fuzz_converge(5, 1000, &seeds, 0.2);
    let elapsed = started.elapsed();
    let total_violations: u64 =
        summary.outcomes.iter().map(|o| o.missing_ref_violations).sum();
    let pass = summary.all_ok() && elapsed.as_secs() < 300;
    verdict(
        1,
        "all replicas byte-identical after 100 fuzzed seeds",
        pass,
        format!(
            "{} seeds, 5 replicas, 1000 ops each, partition prob 0.2, failed seeds {:?}, \
             missing-ref violations {}, elapsed {:.1}s (budget 300s)",
            seeds.len(),
            summary.failed_seeds,
            total_violations,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: ancestor-search oracle

fn synthetic_id(tag: u64, i: usize) -> CommitId {
    Digest32::of(format!("dag-{tag}-{i}").as_bytes())
}

/// Random DAG with up to 256 nodes and up to 4 parents per node. Inserted
/// in topological order; occasionally grows a second root so disjoint
/// histories get exercised.
fn random_dag(rng: &mut ChaCha8Rng, tag: u64) -> (CommitGraph, Vec<CommitId>) {
    let n = rng.gen_range(2..=256);
    let second_root = rng.gen_bool(0.05);
    let mut graph = CommitGraph::new();
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = synthetic_id(tag, i);
        let parents = if i == 0 || (second_root && i == 1) {
            Vec::new()
        } else {
            let k = rng.gen_range(1..=4.min(i));
            let mut ps = BTreeSet::new();
            while ps.len() < k {
                ps.insert(ids[rng.gen_range(0..i)]);
            }
            ps.into_iter().collect()
        };
        graph.insert(id, parents);
        ids.push(id);
    }
    (graph, ids)
}

/// Brute-force reflexive ancestor set.
fn oracle_ancestors(graph: &CommitGraph, start: CommitId) -> BTreeSet<CommitId> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![start];
    while let Some(n) = stack.pop() {
        if !seen.insert(n) {
            continue;
        }
        stack.extend(graph.parents(&n).unwrap_or(&[]).iter().copied());
    }
    seen
}

/// Brute-force maximal common ancestors of two commits.
fn oracle_lca(graph: &CommitGraph, a: CommitId, b: CommitId) -> BTreeSet<CommitId> {
    let common: BTreeSet<CommitId> = oracle_ancestors(graph, a)
        .intersection(&oracle_ancestors(graph, b))
        .copied()
        .collect();
    common
        .iter()
        .filter(|c| {
            !common.iter().any(|other| {
                other != *c && oracle_ancestors(graph, *other).contains(c)
            })
        })
        .copied()
        .collect()
}

#[test]
fn criterion_2_lca_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1ca);
    let mut mismatches = 0usize;
    let mut checked_lca = 0usize;
    let mut checked_norm = 0usize;
    for dag in 0..1000u64 {
        let (graph, ids) = random_dag(&mut rng, dag);
        let a = ids[rng.gen_range(0..ids.len())];
        let b = ids[rng.gen_range(0..ids.len())];
        let expected = oracle_lca(&graph, a, b);
        match lca(&graph, a, &graph, b) {
            Ok(res) => {
                checked_lca += 1;
                if res.ancestors != expected {
                    mismatches += 1;
                    eprintln!("lca mismatch on dag {dag}: got {:?}, want {:?}", res.ancestors, expected);
                }
            }
            Err(DvcsError::NoCommonAncestor) => {
                checked_lca += 1;
                if !expected.is_empty() {
                    mismatches += 1;
                    eprintln!("lca reported no common ancestor on dag {dag}, want {expected:?}");
                }
            }
            Err(e) => {
                mismatches += 1;
                eprintln!("lca unexpected error on dag {dag}: {e}");
            }
        }

        // direct ancestor test against the same oracle
        let anc = oracle_ancestors(&graph, b).contains(&a);
        if is_ancestor(&graph, a, b) != anc {
            mismatches += 1;
            eprintln!("is_ancestor mismatch on dag {dag}");
        }

        // head-set normalization: drop exactly the proper ancestors
        let mut heads = BTreeSet::new();
        for _ in 0..rng.gen_range(1..=8usize) {
            heads.insert(ids[rng.gen_range(0..ids.len())]);
        }
        let expected_heads: BTreeSet<CommitId> = heads
            .iter()
            .filter(|h| {
                !heads.iter().any(|other| {
                    other != *h && oracle_ancestors(&graph, *other).contains(h)
                })
            })
            .copied()
            .collect();
        checked_norm += 1;
        match remove_ancestors(&graph, &heads) {
            Ok(got) if got == expected_heads => {}
            Ok(got) => {
                mismatches += 1;
                eprintln!("remove_ancestors mismatch on dag {dag}: got {got:?}, want {expected_heads:?}");
            }
            Err(e) => {
                mismatches += 1;
                eprintln!("remove_ancestors error on dag {dag}: {e}");
            }
        }
    }
    verdict(
        2,
        "ancestor search matches brute-force oracle",
        mismatches == 0,
        format!(
            "{checked_lca} common-ancestor queries and {checked_norm} head normalizations \
             over 1000 random DAGs (≤256 nodes, ≤4 parents), {mismatches} mismatches"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: join-semilattice laws

/// Random commit-graph state grown from the shared root by commits, merges,
/// branches and pulls.
fn random_dvcs_state(seed: u64) -> CdvcsState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root = CommitNode::root();
    let mut state = CdvcsState::new(&root, "main").unwrap();
    let mut branches = vec!["main".to_string()];
    for i in 0..rng.gen_range(5..30) {
        let branch = branches[rng.gen_range(0..branches.len())].clone();
        let ids: Vec<CommitId> = state.graph().iter().map(|(id, _)| *id).collect();
        match rng.gen_range(0..10) {
            0 => {
                let name = format!("b{seed}-{i}");
                let at = ids[rng.gen_range(0..ids.len())];
                if state.create_branch(name.clone(), at).is_ok() {
                    branches.push(name);
                }
            }
            1 => {
                let target = ids[rng.gen_range(0..ids.len())];
                let remote = state.graph().clone();
                let _ = state.pull(&branch, &remote, target);
            }
            _ => {
                let heads = state.heads(&branch).unwrap().clone();
                let txn = vec![Digest32::of(format!("txn-{seed}-{i}").as_bytes())];
                if heads.len() > 1 {
                    let ordered: Vec<CommitId> = heads.into_iter().collect();
                    let _ = state.merge(&branch, &ordered, txn, BTreeMap::new());
                } else {
                    let head = *heads.iter().next().unwrap();
                    let node = CommitNode::new(vec![head], txn);
                    let _ = state.commit(&branch, &node);
                }
            }
        }
    }
    state
}

fn random_orset(seed: u64) -> OrSetState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = OrSetState::new();
    for _ in 0..rng.gen_range(3..25) {
        let element = format!("e{}", rng.gen_range(0..8));
        let replica = format!("r{}", rng.gen_range(0..3));
        if rng.gen_bool(0.7) {
            set.add(element, &replica);
        } else {
            let _ = set.remove(&element);
        }
    }
    set
}

fn dvcs_join(a: &CdvcsState, b: &CdvcsState) -> Vec<u8> {
    let mut j = a.clone();
    j.state_merge(b).unwrap();
    j.encode()
}

fn orset_join(a: &OrSetState, b: &OrSetState) -> Vec<u8> {
    let mut j = a.clone();
    j.state_merge(b);
    j.encode()
}

#[test]
fn criterion_3_semilattice_laws() {
    let mut failures = 0usize;
    for case in 0..500u64 {
        let (a, b, c) =
            (random_dvcs_state(case * 3), random_dvcs_state(case * 3 + 1), random_dvcs_state(case * 3 + 2));
        // idempotence, commutativity, associativity — by canonical encoding
        if dvcs_join(&a, &a) != a.encode() {
            failures += 1;
            eprintln!("dvcs idempotence failed on case {case}");
        }
        if dvcs_join(&a, &b) != dvcs_join(&b, &a) {
            failures += 1;
            eprintln!("dvcs commutativity failed on case {case}");
        }
        let ab = {
            let mut j = a.clone();
            j.state_merge(&b).unwrap();
            j
        };
        let bc = {
            let mut j = b.clone();
            j.state_merge(&c).unwrap();
            j
        };
        if dvcs_join(&ab, &c) != dvcs_join(&a, &bc) {
            failures += 1;
            eprintln!("dvcs associativity failed on case {case}");
        }

        let (x, y, z) =
            (random_orset(case * 3), random_orset(case * 3 + 1), random_orset(case * 3 + 2));
        if orset_join(&x, &x) != x.encode() {
            failures += 1;
            eprintln!("orset idempotence failed on case {case}");
        }
        if orset_join(&x, &y) != orset_join(&y, &x) {
            failures += 1;
            eprintln!("orset commutativity failed on case {case}");
        }
        let xy = {
            let mut j = x.clone();
            j.state_merge(&y);
            j
        };
        let yz = {
            let mut j = y.clone();
            j.state_merge(&z);
            j
        };
        if orset_join(&xy, &z) != orset_join(&x, &yz) {
            failures += 1;
            eprintln!("orset associativity failed on case {case}");
        }
    }
    verdict(
        3,
        "state merge is a join (idempotent, commutative, associative)",
        failures == 0,
        format!("500 random pairs/triples per datatype, canonical-encoding equality, {failures} failures"),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: flat commit cost at scale

#[test]
fn criterion_4_commit_throughput() {
    let dir = tempfile::tempdir().unwrap();
    let summary = bench_commit(100_000, dir.path()).unwrap();
    let ratio = summary.last_to_first_ratio();
    let pass = ratio <= 3.0 && summary.max_touched_after_warmup <= 2;
    verdict(
        4,
        "100k commits stay flat and touch at most 2 buckets",
        pass,
        format!(
            "decile medians (us) {:?}, last/first ratio {ratio:.2} (limit 3.0), \
             max buckets touched after first 100 commits: {} (limit 2)",
            summary.decile_medians_us, summary.max_touched_after_warmup
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 5: calendar scenario

#[test]
fn criterion_5_calendar_scenario() {
    let mut failed = Vec::new();
    let mut conflicts = 0usize;
    for seed in 0..10u64 {
        let report = scenario_calendar(seed).unwrap();
        conflicts += report.conflicts_observed;
        if !report.passed || !report.converged {
            failed.push((seed, report.assertions));
        }
    }
    verdict(
        5,
        "calendar: concurrent edits conflict, merge converges, private branches stay clean",
        failed.is_empty() && conflicts > 0,
        format!("10 seeds, {conflicts} conflicts observed and resolved, failures: {failed:?}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 6: moderated booking

#[test]
fn criterion_6_booking_capacity() {
    let mut failed = Vec::new();
    for seed in 0..50u64 {
        let report = scenario_booking(1, 2, seed).unwrap();
        let accepted_ok = report
            .assertions
            .iter()
            .any(|a| a.name == "accepted-bookings-respect-capacity" && a.pass);
        if !report.passed || !accepted_ok {
            failed.push(seed);
        }
    }
    verdict(
        6,
        "booking: capacity 1 with 2 concurrent requests accepts exactly one",
        failed.is_empty(),
        format!("50 seeds, failing seeds: {failed:?}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 7: store integrity

#[test]
fn criterion_7_store_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = FileStore::open(dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut refs = Vec::new();
    let mut roundtrip_failures = 0usize;
    for i in 0..1000usize {
        let len = rng.gen_range(0..512);
        let mut payload = vec![0u8; len];
        rng.fill(payload.as_mut_slice());
        payload.extend_from_slice(&(i as u64).to_be_bytes());
        let r = store.put(&payload).unwrap();
        if store.get(&r).unwrap() != payload {
            roundtrip_failures += 1;
        }
        refs.push((r, payload));
    }

    // flip one byte on disk and expect the read to be refused
    let (victim, _) = refs[500];
    let hex = victim.to_hex();
    let path = dir.path().join("values").join(&hex[..2]).join(&hex[2..]);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    let tamper_detected = matches!(store.get(&victim), Err(StoreError::Integrity(_)));

    // fetch-before-apply instrumentation: a partitioned fuzz run must never
    // attempt to apply a delta whose referenced values are absent
    let mut violations = 0u64;
    for seed in 0..10u64 {
        violations += fuzz_seed(4, 200, 0.4, seed).missing_ref_violations;
    }

    let pass = roundtrip_failures == 0 && tamper_detected && violations == 0;
    verdict(
        7,
        "store roundtrips verify, tampering is detected, applies never lack refs",
        pass,
        format!(
            "1000 roundtrips ({roundtrip_failures} failures), tamper detected: {tamper_detected}, \
             missing-ref violations across 10 partitioned runs: {violations}"
        ),
    );
}
