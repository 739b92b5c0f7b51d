//! A confluent DVCS-style replicated datatype.
//!
//! State is an add-only commit DAG plus a set of branch heads per branch.
//! Upstream operations (commit, branch, pull, merge) run at the source
//! replica and emit a purely additive [`DownstreamOp`]; downstream
//! application unions the additions into the graph and re-normalizes the
//! head sets by removing stale ancestors. Concurrent writes surface as
//! multiple heads (a conflict) instead of being auto-resolved; a later merge
//! commit collapses them. Replica states form a join-semilattice under
//! [`CdvcsState::state_merge`], so replicas converge regardless of delivery
//! order.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet, VecDeque};

use crate::codec::{DecodeError, Reader, Writer};
use crate::hash::{CommitId, Digest32, HashRef};

pub type BranchId = String;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DvcsError {
    #[error("root commit must have no parents")]
    InvalidRoot,
    #[error("no such branch: {0}")]
    NoSuchBranch(BranchId),
    #[error("branch {0} has multiple heads; merge the conflict first")]
    ConflictPending(BranchId),
    #[error("commit parent does not match the current branch head")]
    StaleParent,
    #[error("branch already exists: {0}")]
    BranchExists(BranchId),
    #[error("unknown commit: {0:?}")]
    UnknownCommit(CommitId),
    #[error("merge heads do not match the current branch heads")]
    StaleMerge,
    #[error("branch has a single head; nothing to merge")]
    NothingToMerge,
    #[error("operation references a commit missing locally: {0:?}")]
    MissingDependency(CommitId),
    #[error("the two histories share no common ancestor")]
    NoCommonAncestor,
}

/// A commit: ordered parent list, transaction payload references and a small
/// metadata map. The commit's identity is the digest of its canonical
/// encoding, so identical nodes get identical ids on every platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitNode {
    pub parents: Vec<CommitId>,
    pub txn_refs: Vec<HashRef>,
    pub meta: BTreeMap<String, String>,
}

impl CommitNode {
    pub fn root() -> Self {
        CommitNode { parents: Vec::new(), txn_refs: Vec::new(), meta: BTreeMap::new() }
    }

    pub fn new(parents: Vec<CommitId>, txn_refs: Vec<HashRef>) -> Self {
        CommitNode { parents, txn_refs, meta: BTreeMap::new() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.parents.len() as u32);
        for p in &self.parents {
            w.digest(p);
        }
        w.u32(self.txn_refs.len() as u32);
        for r in &self.txn_refs {
            w.digest(r);
        }
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let node = Self::read(&mut r)?;
        r.done()?;
        Ok(node)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let np = r.u32()? as usize;
        let parents = (0..np).map(|_| r.digest()).collect::<Result<Vec<_>, _>>()?;
        let nt = r.u32()? as usize;
        let txn_refs = (0..nt).map(|_| r.digest()).collect::<Result<Vec<_>, _>>()?;
        let nm = r.u32()? as usize;
        let mut meta = BTreeMap::new();
        for _ in 0..nm {
            let k = r.str()?;
            let v = r.str()?;
            meta.insert(k, v);
        }
        Ok(CommitNode { parents, txn_refs, meta })
    }

    /// The commit id this node will be known by.
    pub fn id(&self) -> CommitId {
        Digest32::of(&self.encode())
    }
}

/// Add-only DAG mapping each commit id to its ordered parent list.
///
/// Alongside the topology the graph maintains generation numbers (1 + the
/// maximum parent generation, 1 for roots). They are fully derived from the
/// parent lists and excluded from equality and encoding; ancestor searches
/// use them to expand frontiers in generation order and terminate early.
/// Nodes whose parents are not (yet) present — graph fragments under
/// construction — simply have no generation until the gap closes.
#[derive(Debug, Clone, Default)]
pub struct CommitGraph {
    nodes: BTreeMap<CommitId, Vec<CommitId>>,
    gens: BTreeMap<CommitId, u64>,
    unresolved: BTreeSet<CommitId>,
}

impl PartialEq for CommitGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
    }
}

impl Eq for CommitGraph {}

impl CommitGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: &CommitId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn parents(&self, id: &CommitId) -> Option<&[CommitId]> {
        self.nodes.get(id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CommitId, &[CommitId])> {
        self.nodes.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Generation number of a node: 1 for roots, 1 + max parent generation
    /// otherwise. None while the node's ancestry is not fully present.
    pub fn generation(&self, id: &CommitId) -> Option<u64> {
        self.gens.get(id).copied()
    }

    fn try_gen(&self, parents: &[CommitId]) -> Option<u64> {
        let mut max = 0u64;
        for p in parents {
            max = max.max(*self.gens.get(p)?);
        }
        Some(max + 1)
    }

    /// Assigns generations to nodes whose parents have since all arrived,
    /// propagating in dependency order through the unresolved set.
    fn resolve_gens(&mut self) {
        // children edges among the still-unresolved nodes
        let mut children: BTreeMap<CommitId, Vec<CommitId>> = BTreeMap::new();
        let mut ready: Vec<CommitId> = Vec::new();
        for id in &self.unresolved {
            let parents = self.nodes.get(id).expect("unresolved ids are nodes");
            if self.try_gen(parents).is_some() {
                ready.push(*id);
            }
            for p in parents {
                if self.unresolved.contains(p) {
                    children.entry(*p).or_default().push(*id);
                }
            }
        }
        while let Some(id) = ready.pop() {
            let parents = self.nodes.get(&id).expect("unresolved ids are nodes");
            let Some(g) = self.try_gen(parents) else { continue };
            self.gens.insert(id, g);
            self.unresolved.remove(&id);
            if let Some(cs) = children.get(&id) {
                for c in cs.clone() {
                    if !self.gens.contains_key(&c)
                        && self.try_gen(self.nodes.get(&c).expect("child is a node")).is_some()
                    {
                        ready.push(c);
                    }
                }
            }
        }
    }

    /// Inserts a node. Re-inserting an existing id is a no-op: ids are
    /// content digests, so the parent list cannot differ.
    pub fn insert(&mut self, id: CommitId, parents: Vec<CommitId>) {
        if self.nodes.contains_key(&id) {
            return;
        }
        match self.try_gen(&parents) {
            Some(g) => {
                self.gens.insert(id, g);
                self.nodes.insert(id, parents);
                if !self.unresolved.is_empty() {
                    self.resolve_gens();
                }
            }
            None => {
                self.nodes.insert(id, parents);
                self.unresolved.insert(id);
            }
        }
    }

    /// Unions another graph fragment in (add-only).
    pub fn union_with(&mut self, other: &CommitGraph) {
        for (id, ps) in &other.nodes {
            if !self.nodes.contains_key(id) {
                self.nodes.insert(*id, ps.clone());
                self.unresolved.insert(*id);
            }
        }
        self.resolve_gens();
    }

    /// True when every parent referenced anywhere is itself a key, possibly
    /// with `base` supplying additional known nodes.
    pub fn is_parent_closed_with(&self, base: Option<&CommitGraph>) -> bool {
        self.first_unclosed_parent(base).is_none()
    }

    pub(crate) fn first_unclosed_parent(&self, base: Option<&CommitGraph>) -> Option<CommitId> {
        for ps in self.nodes.values() {
            for p in ps {
                if !self.contains(p) && !base.map_or(false, |b| b.contains(p)) {
                    return Some(*p);
                }
            }
        }
        None
    }

    /// Topological-sort based acyclicity check. Intended for tests and
    /// invariant audits on small instances.
    pub fn is_acyclic(&self) -> bool {
        // Kahn's algorithm over parent edges (node -> parent).
        let mut out_deg: BTreeMap<CommitId, usize> = BTreeMap::new();
        let mut children: BTreeMap<CommitId, Vec<CommitId>> = BTreeMap::new();
        for (id, ps) in &self.nodes {
            out_deg.entry(*id).or_insert(0);
            for p in ps {
                *out_deg.entry(*id).or_insert(0) += 1;
                children.entry(*p).or_default().push(*id);
            }
        }
        let mut ready: VecDeque<CommitId> =
            out_deg.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut seen = 0usize;
        while let Some(n) = ready.pop_front() {
            seen += 1;
            for c in children.get(&n).map(|v| v.as_slice()).unwrap_or(&[]) {
                let d = out_deg.get_mut(c).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push_back(*c);
                }
            }
        }
        seen == self.nodes.len()
    }

    pub fn write(&self, w: &mut Writer) {
        w.u32(self.nodes.len() as u32);
        for (id, ps) in &self.nodes {
            w.digest(id);
            w.u32(ps.len() as u32);
            for p in ps {
                w.digest(p);
            }
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.u32()? as usize;
        let mut nodes = BTreeMap::new();
        for _ in 0..n {
            let id = r.digest()?;
            let np = r.u32()? as usize;
            let ps = (0..np).map(|_| r.digest()).collect::<Result<Vec<_>, _>>()?;
            nodes.insert(id, ps);
        }
        let unresolved = nodes.keys().copied().collect();
        let mut graph = CommitGraph { nodes, gens: BTreeMap::new(), unresolved };
        graph.resolve_gens();
        Ok(graph)
    }
}

impl FromIterator<(CommitId, Vec<CommitId>)> for CommitGraph {
    fn from_iter<T: IntoIterator<Item = (CommitId, Vec<CommitId>)>>(iter: T) -> Self {
        let nodes: BTreeMap<CommitId, Vec<CommitId>> = iter.into_iter().collect();
        let unresolved = nodes.keys().copied().collect();
        let mut graph = CommitGraph { nodes, gens: BTreeMap::new(), unresolved };
        graph.resolve_gens();
        graph
    }
}

/// Additive delta shipped between replicas: a graph fragment plus new head
/// candidates for one branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownstreamOp {
    pub branch: BranchId,
    pub added_graph: CommitGraph,
    pub added_heads: BTreeSet<CommitId>,
}

impl DownstreamOp {
    pub fn is_empty(&self) -> bool {
        self.added_graph.is_empty() && self.added_heads.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn write(&self, w: &mut Writer) {
        w.str(&self.branch);
        self.added_graph.write(w);
        w.u32(self.added_heads.len() as u32);
        for h in &self.added_heads {
            w.digest(h);
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let op = Self::read(&mut r)?;
        r.done()?;
        Ok(op)
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let branch = r.str()?;
        let added_graph = CommitGraph::read(r)?;
        let n = r.u32()? as usize;
        let mut added_heads = BTreeSet::new();
        for _ in 0..n {
            added_heads.insert(r.digest()?);
        }
        Ok(DownstreamOp { branch, added_graph, added_heads })
    }
}

/// Result of a lowest-common-ancestor search: the maximal common ancestors
/// and the node sets traversed from each side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LcaResult {
    pub ancestors: BTreeSet<CommitId>,
    pub visited_a: BTreeSet<CommitId>,
    pub visited_b: BTreeSet<CommitId>,
}

/// Full replica state: one shared commit graph, heads per branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdvcsState {
    graph: CommitGraph,
    branches: BTreeMap<BranchId, BTreeSet<CommitId>>,
}

impl CdvcsState {
    /// Initializes a repository with a root commit and one branch pointing
    /// at it.
    pub fn new(root_node: &CommitNode, branch: impl Into<BranchId>) -> Result<Self, DvcsError> {
        if !root_node.parents.is_empty() {
            return Err(DvcsError::InvalidRoot);
        }
        let root = root_node.id();
        let mut graph = CommitGraph::new();
        graph.insert(root, Vec::new());
        let mut branches = BTreeMap::new();
        branches.insert(branch.into(), BTreeSet::from([root]));
        Ok(CdvcsState { graph, branches })
    }

    /// An uninitialized state with no commits and no branches, used as the
    /// replication bootstrap target before the first delta or state sync
    /// arrives.
    pub fn empty() -> Self {
        CdvcsState { graph: CommitGraph::new(), branches: BTreeMap::new() }
    }

    pub fn graph(&self) -> &CommitGraph {
        &self.graph
    }

    pub fn branches(&self) -> impl Iterator<Item = (&BranchId, &BTreeSet<CommitId>)> {
        self.branches.iter()
    }

    pub fn has_branch(&self, branch: &str) -> bool {
        self.branches.contains_key(branch)
    }

    pub fn heads(&self, branch: &str) -> Result<&BTreeSet<CommitId>, DvcsError> {
        self.branches.get(branch).ok_or_else(|| DvcsError::NoSuchBranch(branch.to_string()))
    }

    /// The single head of a branch, or `ConflictPending` when the branch is
    /// conflicted.
    pub fn single_head(&self, branch: &str) -> Result<CommitId, DvcsError> {
        let heads = self.heads(branch)?;
        if heads.len() == 1 {
            Ok(*heads.iter().next().unwrap())
        } else {
            Err(DvcsError::ConflictPending(branch.to_string()))
        }
    }

    /// Commits a new value to a branch. The node's parent list must be
    /// exactly the branch's unique current head; conflicted branches refuse
    /// commits until merged.
    pub fn commit(&mut self, branch: &str, node: &CommitNode) -> Result<DownstreamOp, DvcsError> {
        let head = self.single_head(branch)?;
        if node.parents.as_slice() != [head] {
            return Err(DvcsError::StaleParent);
        }
        let c = node.id();
        let mut added_graph = CommitGraph::new();
        added_graph.insert(c, node.parents.clone());
        let op = DownstreamOp {
            branch: branch.to_string(),
            added_graph,
            added_heads: BTreeSet::from([c]),
        };
        self.apply_downstream(&op)?;
        Ok(op)
    }

    /// Creates a new branch at an existing commit without committing.
    pub fn create_branch(
        &mut self,
        new_branch: impl Into<BranchId>,
        at: CommitId,
    ) -> Result<DownstreamOp, DvcsError> {
        let new_branch = new_branch.into();
        if self.branches.contains_key(&new_branch) {
            return Err(DvcsError::BranchExists(new_branch));
        }
        if !self.graph.contains(&at) {
            return Err(DvcsError::UnknownCommit(at));
        }
        let op = DownstreamOp {
            branch: new_branch,
            added_graph: CommitGraph::new(),
            added_heads: BTreeSet::from([at]),
        };
        self.apply_downstream(&op)?;
        Ok(op)
    }

    /// Pulls a remote head into a branch: adds all commits reachable from
    /// `remote_head` that are missing locally and offers the head. Pulling a
    /// head that is already integrated returns an empty no-op delta.
    pub fn pull(
        &mut self,
        branch: &str,
        remote_graph: &CommitGraph,
        remote_head: CommitId,
    ) -> Result<DownstreamOp, DvcsError> {
        let head = self.single_head(branch)?;
        if !remote_graph.contains(&remote_head) {
            return Err(DvcsError::UnknownCommit(remote_head));
        }
        if self.graph.contains(&remote_head) && is_ancestor(&self.graph, remote_head, head) {
            // remote head is already an ancestor of (or equal to) ours
            return Ok(DownstreamOp {
                branch: branch.to_string(),
                added_graph: CommitGraph::new(),
                added_heads: BTreeSet::new(),
            });
        }
        // Collect everything reachable from the remote head that we do not
        // have, stopping at locally known commits. The local graph is
        // parent-closed, so the result is closed under parents within the
        // union.
        let mut added_graph = CommitGraph::new();
        let mut queue = VecDeque::from([remote_head]);
        let mut seen = HashSet::from([remote_head]);
        while let Some(n) = queue.pop_front() {
            if self.graph.contains(&n) || added_graph.contains(&n) {
                continue;
            }
            let ps = remote_graph
                .parents(&n)
                .ok_or(DvcsError::MissingDependency(n))?;
            added_graph.insert(n, ps.to_vec());
            for p in ps {
                if seen.insert(*p) {
                    queue.push_back(*p);
                }
            }
        }
        let op = DownstreamOp {
            branch: branch.to_string(),
            added_graph,
            added_heads: BTreeSet::from([remote_head]),
        };
        self.apply_downstream(&op)?;
        Ok(op)
    }

    /// Resolves a conflict by committing a merge node whose parents are the
    /// branch's current heads, in caller-given order.
    pub fn merge(
        &mut self,
        branch: &str,
        ordered_heads: &[CommitId],
        txn_refs: Vec<HashRef>,
        meta: BTreeMap<String, String>,
    ) -> Result<(DownstreamOp, CommitNode), DvcsError> {
        let distinct: BTreeSet<CommitId> = ordered_heads.iter().copied().collect();
        if distinct.len() < 2 || distinct.len() != ordered_heads.len() {
            return Err(DvcsError::NothingToMerge);
        }
        let current = self.heads(branch)?;
        if &distinct != current {
            return Err(DvcsError::StaleMerge);
        }
        let node = CommitNode { parents: ordered_heads.to_vec(), txn_refs, meta };
        let e = node.id();
        let mut added_graph = CommitGraph::new();
        added_graph.insert(e, node.parents.clone());
        let op = DownstreamOp {
            branch: branch.to_string(),
            added_graph,
            added_heads: BTreeSet::from([e]),
        };
        self.apply_downstream(&op)?;
        Ok((op, node))
    }

    /// Applies an additive delta: graph union, then stale-ancestor removal
    /// on the branch's head set. Idempotent, and commutes with concurrent
    /// deltas. Unknown branches are created.
    pub fn apply_downstream(&mut self, op: &DownstreamOp) -> Result<(), DvcsError> {
        if let Some(p) = op.added_graph.first_unclosed_parent(Some(&self.graph)) {
            return Err(DvcsError::MissingDependency(p));
        }
        for h in &op.added_heads {
            if !self.graph.contains(h) && !op.added_graph.contains(h) {
                return Err(DvcsError::MissingDependency(*h));
            }
        }
        self.graph.union_with(&op.added_graph);
        let heads = self.branches.entry(op.branch.clone()).or_default();
        let mut union: BTreeSet<CommitId> = heads.iter().copied().collect();
        union.extend(op.added_heads.iter().copied());
        *heads = remove_ancestors(&self.graph, &union)?;
        Ok(())
    }

    /// Join-semilattice merge of two full states: graph union, per-branch
    /// head union followed by stale-ancestor removal. Used for initial
    /// full-state replication and reconciliation after partitions.
    pub fn state_merge(&mut self, other: &CdvcsState) -> Result<(), DvcsError> {
        self.graph.union_with(&other.graph);
        for (branch, other_heads) in &other.branches {
            let heads = self.branches.entry(branch.clone()).or_default();
            let mut union: BTreeSet<CommitId> = heads.iter().copied().collect();
            union.extend(other_heads.iter().copied());
            *heads = remove_ancestors(&self.graph, &union)?;
        }
        Ok(())
    }

    /// The conflicting heads of a branch, or `None` when it has a single
    /// head.
    pub fn conflicts(&self, branch: &str) -> Result<Option<BTreeSet<CommitId>>, DvcsError> {
        let heads = self.heads(branch)?;
        if heads.len() > 1 {
            Ok(Some(heads.clone()))
        } else {
            Ok(None)
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn write(&self, w: &mut Writer) {
        self.graph.write(w);
        w.u32(self.branches.len() as u32);
        for (b, heads) in &self.branches {
            w.str(b);
            w.u32(heads.len() as u32);
            for h in heads {
                w.digest(h);
            }
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let s = Self::read(&mut r)?;
        r.done()?;
        Ok(s)
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let graph = CommitGraph::read(r)?;
        let nb = r.u32()? as usize;
        let mut branches = BTreeMap::new();
        for _ in 0..nb {
            let b = r.str()?;
            let nh = r.u32()? as usize;
            let mut heads = BTreeSet::new();
            for _ in 0..nh {
                heads.insert(r.digest()?);
            }
            branches.insert(b, heads);
        }
        Ok(CdvcsState { graph, branches })
    }
}

const FLAG_A: u8 = 1;
const FLAG_B: u8 = 2;
const FLAG_STALE: u8 = 4;

/// Lowest-common-ancestor search over the union of two graphs.
///
/// Bidirectional expansion from both start commits over parent edges,
/// processed in descending generation order so a frontier can never outrun
/// the staleness that chases it. A node reached from both sides is a
/// common-ancestor candidate; its ancestors are marked stale and expansion
/// stops once no live (non-stale) frontier entry remains, long before old
/// history is touched. A final maximality filter drops candidates that are
/// proper ancestors of other candidates.
pub fn lca(
    graph_a: &CommitGraph,
    start_a: CommitId,
    graph_b: &CommitGraph,
    start_b: CommitId,
) -> Result<LcaResult, DvcsError> {
    if !graph_a.contains(&start_a) {
        return Err(DvcsError::UnknownCommit(start_a));
    }
    if !graph_b.contains(&start_b) {
        return Err(DvcsError::UnknownCommit(start_b));
    }
    let parents_of = |id: &CommitId| graph_a.parents(id).or_else(|| graph_b.parents(id));
    // unresolved generations (possible only on non-closed fragments) sort
    // last, which affects the traversal order but not the result
    let gen_of =
        |id: &CommitId| graph_a.generation(id).or_else(|| graph_b.generation(id)).unwrap_or(0);

    let mut flags: HashMap<CommitId, u8> = HashMap::new();
    // max-heap on generation; `counted` marks entries that were non-stale
    // when pushed, and the loop runs while any counted entry remains queued
    let mut queue: BinaryHeap<(u64, CommitId, bool)> = BinaryHeap::new();
    let mut live = 0usize;
    let mut candidates: BTreeSet<CommitId> = BTreeSet::new();

    let push = |id: CommitId,
                add: u8,
                flags: &mut HashMap<CommitId, u8>,
                queue: &mut BinaryHeap<(u64, CommitId, bool)>,
                live: &mut usize| {
        let f = flags.entry(id).or_insert(0);
        if *f | add != *f {
            *f |= add;
            let counted = *f & FLAG_STALE == 0;
            if counted {
                *live += 1;
            }
            queue.push((gen_of(&id), id, counted));
        }
    };

    push(start_a, FLAG_A, &mut flags, &mut queue, &mut live);
    push(start_b, FLAG_B, &mut flags, &mut queue, &mut live);

    while live > 0 {
        let (_, n, counted) = queue.pop().expect("live > 0 implies nonempty queue");
        if counted {
            live -= 1;
        }
        let mut f = flags[&n];
        if f & (FLAG_A | FLAG_B) == FLAG_A | FLAG_B && f & FLAG_STALE == 0 {
            candidates.insert(n);
            // everything above a common ancestor is stale
            f |= FLAG_STALE;
            flags.insert(n, f);
        }
        if let Some(ps) = parents_of(&n) {
            // propagate side flags, plus staleness below common nodes
            let add = f & (FLAG_A | FLAG_B | FLAG_STALE);
            for p in ps.to_vec() {
                push(p, add, &mut flags, &mut queue, &mut live);
            }
        }
    }

    if candidates.is_empty() {
        return Err(DvcsError::NoCommonAncestor);
    }

    // Maximality filter: drop candidates reachable (as proper ancestors)
    // from other candidates. The walk stays within the generation band of
    // the candidate set: nothing older than the oldest candidate can lead
    // back to one.
    let ancestors = if candidates.len() == 1 {
        candidates.clone()
    } else {
        let floor = candidates.iter().map(|c| gen_of(c)).min().unwrap_or(0);
        let mut reach: HashSet<CommitId> = HashSet::new();
        let mut queue: VecDeque<CommitId> = VecDeque::new();
        for c in &candidates {
            for p in parents_of(c).unwrap_or(&[]) {
                if reach.insert(*p) {
                    queue.push_back(*p);
                }
            }
        }
        while let Some(n) = queue.pop_front() {
            if gen_of(&n) <= floor && gen_of(&n) != 0 {
                continue;
            }
            for p in parents_of(&n).unwrap_or(&[]) {
                if reach.insert(*p) {
                    queue.push_back(*p);
                }
            }
        }
        candidates.iter().filter(|c| !reach.contains(c)).copied().collect()
    };

    let visited_a = flags
        .iter()
        .filter(|(_, f)| **f & FLAG_A != 0)
        .map(|(id, _)| *id)
        .collect();
    let visited_b = flags
        .iter()
        .filter(|(_, f)| **f & FLAG_B != 0)
        .map(|(id, _)| *id)
        .collect();
    Ok(LcaResult { ancestors, visited_a, visited_b })
}

/// True when `anc` is an ancestor of `desc` (reflexively) via parent edges.
///
/// The walk from `desc` never expands a node whose generation is at or
/// below `anc`'s: no path through older history can climb back up to it.
/// For the common case of comparing a head against a direct extension this
/// terminates after one step.
pub fn is_ancestor(graph: &CommitGraph, anc: CommitId, desc: CommitId) -> bool {
    if anc == desc {
        return true;
    }
    let floor = graph.generation(&anc).unwrap_or(0);
    let mut seen: HashSet<CommitId> = HashSet::from([desc]);
    let mut stack = vec![desc];
    while let Some(n) = stack.pop() {
        for p in graph.parents(&n).unwrap_or(&[]) {
            if *p == anc {
                return true;
            }
            if graph.generation(p).unwrap_or(u64::MAX) > floor && seen.insert(*p) {
                stack.push(*p);
            }
        }
    }
    false
}

/// Normalizes a head set by dropping every head that is a proper ancestor of
/// another. Only pairs with strictly ordered generations can be related, so
/// genuinely concurrent heads cost almost nothing to keep.
pub fn remove_ancestors(
    graph: &CommitGraph,
    heads: &BTreeSet<CommitId>,
) -> Result<BTreeSet<CommitId>, DvcsError> {
    for h in heads {
        if !graph.contains(h) {
            return Err(DvcsError::UnknownCommit(*h));
        }
    }
    let list: Vec<CommitId> = heads.iter().copied().collect();
    let mut stale: HashSet<CommitId> = HashSet::new();
    for (i, a) in list.iter().enumerate() {
        if stale.contains(a) {
            continue;
        }
        for b in list.iter().skip(i + 1) {
            if stale.contains(b) {
                continue;
            }
            let (ga, gb) = (graph.generation(a), graph.generation(b));
            // equal resolved generations cannot be related; unresolved ones
            // (fragments) must be checked both ways
            let (try_a, try_b) = match (ga, gb) {
                (Some(ga), Some(gb)) => (ga < gb, gb < ga),
                _ => (true, true),
            };
            if try_a && is_ancestor(graph, *a, *b) {
                stale.insert(*a);
                break;
            } else if try_b && is_ancestor(graph, *b, *a) {
                stale.insert(*b);
            }
        }
    }
    Ok(list.into_iter().filter(|h| !stale.contains(h)).collect())
}

/// Linearizes the history of a commit back to the root: a deterministic
/// topological order in which every ancestor appears exactly once, after all
/// of its parents. Tie-break: depth-first from `c`, visiting parents in
/// stored list order, emitting each commit on first completion.
pub fn commit_history(graph: &CommitGraph, c: CommitId) -> Result<Vec<CommitId>, DvcsError> {
    if !graph.contains(&c) {
        return Err(DvcsError::UnknownCommit(c));
    }
    let mut order = Vec::new();
    let mut emitted: HashSet<CommitId> = HashSet::new();
    let mut stack: Vec<(CommitId, usize)> = vec![(c, 0)];
    while let Some((n, i)) = stack.last_mut() {
        let ps = graph.parents(n).expect("graph is parent-closed");
        if *i < ps.len() {
            let p = ps[*i];
            *i += 1;
            if !emitted.contains(&p) {
                stack.push((p, 0));
            }
        } else {
            let n = *n;
            stack.pop();
            if emitted.insert(n) {
                order.push(n);
            }
        }
    }
    Ok(order)
}
