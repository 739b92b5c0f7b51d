//! Property tests: canonical encodings roundtrip, the OR-set is add-wins,
//! both datatypes satisfy the join-semilattice laws (by byte-identical
//! canonical encodings), and the generation-pruned ancestor searches agree
//! with brute-force oracles on arbitrary DAGs.

use std::collections::{BTreeMap, BTreeSet};

use proptest::collection::{btree_map, vec};
use proptest::prelude::*;
use proptest::sample::Index;

use confluence::dvcs::{
    is_ancestor, lca, CdvcsState, CommitGraph, CommitNode, DownstreamOp, DvcsError,
    remove_ancestors,
};
use confluence::fuzz::reachable;
use confluence::hash::{CommitId, Digest32};
use confluence::orset::OrSetState;
use confluence::peer::{Crdt, CrdtOp, MessageBody, PeerMessage};

// ---------------------------------------------------------------- strategies

fn arb_digest() -> impl Strategy<Value = Digest32> {
    any::<[u8; 32]>().prop_map(Digest32)
}

fn arb_meta() -> impl Strategy<Value = BTreeMap<String, String>> {
    btree_map("[a-z]{1,8}", "[ -~]{0,16}", 0..4)
}

fn arb_commit_node() -> impl Strategy<Value = CommitNode> {
    (vec(arb_digest(), 0..4), vec(arb_digest(), 0..3), arb_meta())
        .prop_map(|(parents, txn_refs, meta)| CommitNode { parents, txn_refs, meta })
}

/// A random DAG rooted at node 0: each later node picks 1..=3 parents among
/// earlier nodes. Returns the graph and the node ids in creation order.
/// A per-node transaction ref keeps every id distinct.
fn arb_dag() -> impl Strategy<Value = (CommitGraph, Vec<CommitId>)> {
    vec(vec(any::<Index>(), 1..=3), 0..40).prop_map(|spec| {
        let mut graph = CommitGraph::new();
        let mut ids = Vec::with_capacity(spec.len() + 1);
        let root = CommitNode::root().id();
        graph.insert(root, Vec::new());
        ids.push(root);
        for (i, picks) in spec.into_iter().enumerate() {
            let mut parents = Vec::new();
            for p in picks {
                let cand = ids[p.index(ids.len())];
                if !parents.contains(&cand) {
                    parents.push(cand);
                }
            }
            let salt = Digest32::of(&(i as u64).to_be_bytes());
            let id = CommitNode::new(parents.clone(), vec![salt]).id();
            graph.insert(id, parents);
            ids.push(id);
        }
        (graph, ids)
    })
}

/// Script steps folded into a CDVCS state: commit when the branch has a
/// single head, merge its heads otherwise, or pull a previously created
/// commit back into the branch.
fn arb_dvcs_state() -> impl Strategy<Value = CdvcsState> {
    vec((any::<u8>(), any::<Index>()), 0..24).prop_map(|script| {
        let root = CommitNode::root();
        let mut state = CdvcsState::new(&root, "main").unwrap();
        let branches = ["main", "side"];
        for (i, (kind, pick)) in script.into_iter().enumerate() {
            let branch = branches[(kind % 2) as usize];
            if !state.has_branch(branch) {
                state.create_branch(branch, root.id()).unwrap();
            }
            match kind / 2 % 3 {
                0 | 1 => match state.single_head(branch) {
                    Ok(head) => {
                        let salt = Digest32::of(&(i as u64).to_be_bytes());
                        let node = CommitNode::new(vec![head], vec![salt]);
                        state.commit(branch, &node).unwrap();
                    }
                    Err(DvcsError::ConflictPending(_)) => {
                        let heads: Vec<CommitId> =
                            state.heads(branch).unwrap().iter().copied().collect();
                        state.merge(branch, &heads, Vec::new(), BTreeMap::new()).unwrap();
                    }
                    Err(e) => panic!("unexpected: {e}"),
                },
                _ => {
                    let ids: Vec<CommitId> = state.graph().iter().map(|(id, _)| *id).collect();
                    let target = ids[pick.index(ids.len())];
                    if state.single_head(branch).is_ok() {
                        let remote = state.graph().clone();
                        state.pull(branch, &remote, target).unwrap();
                    }
                }
            }
        }
        state
    })
}

/// An OR-set built from a script of adds and removes across three replicas.
fn arb_orset() -> impl Strategy<Value = OrSetState> {
    vec(("[a-e]", any::<bool>(), 0u8..3), 0..20).prop_map(|script| {
        let mut s = OrSetState::new();
        for (elem, is_add, replica) in script {
            if is_add {
                s.add(elem.clone(), &format!("r{replica}"));
            } else {
                let _ = s.remove(&elem);
            }
        }
        s
    })
}

// ------------------------------------------------------------------- oracles

fn oracle_ancestors(graph: &CommitGraph, from: CommitId) -> BTreeSet<CommitId> {
    graph.iter().map(|(id, _)| *id).filter(|id| reachable(graph, from, *id)).collect()
}

fn oracle_lca(graph: &CommitGraph, a: CommitId, b: CommitId) -> BTreeSet<CommitId> {
    let common: BTreeSet<CommitId> = oracle_ancestors(graph, a)
        .intersection(&oracle_ancestors(graph, b))
        .copied()
        .collect();
    common
        .iter()
        .filter(|c| !common.iter().any(|o| *o != **c && reachable(graph, *o, **c)))
        .copied()
        .collect()
}

// ---------------------------------------------------------------- properties

proptest! {
    #[test]
    fn commit_node_encoding_roundtrips(node in arb_commit_node()) {
        let decoded = CommitNode::decode(&node.encode()).unwrap();
        prop_assert_eq!(&decoded, &node);
        prop_assert_eq!(decoded.id(), node.id());
    }

    #[test]
    fn downstream_op_encoding_roundtrips(
        branch in "[a-z]{1,10}",
        (graph, ids) in arb_dag(),
        pick in any::<Index>(),
    ) {
        let head = ids[pick.index(ids.len())];
        let op = DownstreamOp { branch, added_graph: graph, added_heads: BTreeSet::from([head]) };
        prop_assert_eq!(DownstreamOp::decode(&op.encode()).unwrap(), op);
    }

    #[test]
    fn state_encoding_roundtrips(state in arb_dvcs_state()) {
        let decoded = CdvcsState::decode(&state.encode()).unwrap();
        prop_assert_eq!(decoded.encode(), state.encode());
        prop_assert_eq!(decoded.graph().len(), state.graph().len());
    }

    #[test]
    fn orset_encoding_roundtrips(s in arb_orset()) {
        let decoded = OrSetState::decode(&s.encode()).unwrap();
        prop_assert_eq!(decoded.encode(), s.encode());
        prop_assert_eq!(decoded.elements(), s.elements());
    }

    #[test]
    fn peer_message_encoding_roundtrips(
        crdt_id in "[a-z]{1,8}",
        origin in "[a-z]{1,8}",
        tag in 0u8..4,
        refs in vec(arb_digest(), 0..4),
        state in arb_orset(),
    ) {
        let body = match tag {
            0 => MessageBody::Subscribe,
            1 => MessageBody::FetchRequest(refs),
            2 => MessageBody::StateSyncRequest,
            _ => MessageBody::StateSyncResponse(Crdt::OrSet(state)),
        };
        let msg = PeerMessage { crdt_id, origin, body };
        prop_assert_eq!(PeerMessage::decode(&msg.encode()).unwrap(), msg);
    }

    #[test]
    fn publish_op_message_roundtrips(
        crdt_id in "[a-z]{1,8}",
        origin in "[a-z]{1,8}",
        state in arb_dvcs_state(),
    ) {
        let heads: BTreeSet<CommitId> = state.heads("main").unwrap().clone();
        let op = DownstreamOp {
            branch: "main".into(),
            added_graph: state.graph().clone(),
            added_heads: heads,
        };
        let msg = PeerMessage {
            crdt_id,
            origin,
            body: MessageBody::PublishOp(CrdtOp::Dvcs(op)),
        };
        prop_assert_eq!(PeerMessage::decode(&msg.encode()).unwrap(), msg);
    }

    #[test]
    fn orset_is_add_wins(base in arb_orset(), elem in "[a-e]") {
        // seed the element so the concurrent remove has something to strike
        let mut base = base;
        base.add(elem.clone(), "seed");
        let mut a = base.clone();
        let mut b = base.clone();
        let add = a.add(elem.clone(), "a");
        let rem = b.remove(&elem).unwrap();
        // deliver the concurrent ops across
        a.apply_downstream(&rem);
        b.apply_downstream(&add);
        prop_assert!(a.contains(&elem), "add must win over a concurrent remove");
        prop_assert_eq!(a.encode(), b.encode());
    }

    #[test]
    fn orset_merge_laws(
        a in arb_orset(),
        b in arb_orset(),
        c in arb_orset(),
    ) {
        // idempotence
        let mut aa = a.clone();
        aa.state_merge(&a);
        prop_assert_eq!(aa.encode(), a.encode());
        // commutativity
        let mut ab = a.clone();
        ab.state_merge(&b);
        let mut ba = b.clone();
        ba.state_merge(&a);
        prop_assert_eq!(ab.encode(), ba.encode());
        // associativity
        let mut bc = b.clone();
        bc.state_merge(&c);
        let mut a_bc = a.clone();
        a_bc.state_merge(&bc);
        let mut ab_c = ab;
        ab_c.state_merge(&c);
        prop_assert_eq!(a_bc.encode(), ab_c.encode());
    }

    #[test]
    fn dvcs_merge_laws(
        a in arb_dvcs_state(),
        b in arb_dvcs_state(),
        c in arb_dvcs_state(),
    ) {
        // idempotence
        let mut aa = a.clone();
        aa.state_merge(&a).unwrap();
        prop_assert_eq!(aa.encode(), a.encode());
        // commutativity
        let mut ab = a.clone();
        ab.state_merge(&b).unwrap();
        let mut ba = b.clone();
        ba.state_merge(&a).unwrap();
        prop_assert_eq!(ab.encode(), ba.encode());
        // associativity
        let mut bc = b.clone();
        bc.state_merge(&c).unwrap();
        let mut a_bc = a.clone();
        a_bc.state_merge(&bc).unwrap();
        let mut ab_c = ab;
        ab_c.state_merge(&c).unwrap();
        prop_assert_eq!(a_bc.encode(), ab_c.encode());
    }

    #[test]
    fn lca_matches_brute_force(
        (graph, ids) in arb_dag(),
        pa in any::<Index>(),
        pb in any::<Index>(),
    ) {
        let a = ids[pa.index(ids.len())];
        let b = ids[pb.index(ids.len())];
        let got = lca(&graph, a, &graph, b).unwrap().ancestors;
        prop_assert_eq!(got, oracle_lca(&graph, a, b));
    }

    #[test]
    fn is_ancestor_matches_brute_force(
        (graph, ids) in arb_dag(),
        pa in any::<Index>(),
        pb in any::<Index>(),
    ) {
        let a = ids[pa.index(ids.len())];
        let b = ids[pb.index(ids.len())];
        prop_assert_eq!(is_ancestor(&graph, a, b), reachable(&graph, b, a));
    }

    #[test]
    fn remove_ancestors_keeps_exactly_maximal_heads(
        (graph, ids) in arb_dag(),
        picks in vec(any::<Index>(), 1..6),
    ) {
        let set: BTreeSet<CommitId> = picks.iter().map(|p| ids[p.index(ids.len())]).collect();
        let got = remove_ancestors(&graph, &set).unwrap();
        let expected: BTreeSet<CommitId> = set
            .iter()
            .filter(|c| !set.iter().any(|o| o != *c && reachable(&graph, *o, **c)))
            .copied()
            .collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn apply_downstream_is_idempotent(state in arb_dvcs_state()) {
        let heads = state.heads("main").unwrap().clone();
        let op = DownstreamOp {
            branch: "main".into(),
            added_graph: state.graph().clone(),
            added_heads: heads,
        };
        let mut once = state.clone();
        once.apply_downstream(&op).unwrap();
        prop_assert_eq!(once.encode(), state.encode());
        let mut twice = once.clone();
        twice.apply_downstream(&op).unwrap();
        prop_assert_eq!(twice.encode(), once.encode());
    }
}
