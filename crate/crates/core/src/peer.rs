//! Replication peer: op-based pub-sub gossip with fetch-before-apply.
//!
//! A peer is a sequential state machine. It hosts CRDT instances, a
//! content-addressed value store, and per-neighbor subscriptions. Remote
//! deltas pass through pull hooks at ingress; their value dependencies are
//! fetched and verified before the delta is applied atomically, so a CRDT
//! state never references a payload absent from the local store. Only
//! novelty is rebroadcast: an already-applied delta is dropped.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::codec::{DecodeError, Reader, Writer};
use crate::dvcs::{BranchId, CdvcsState, CommitGraph, CommitNode, DownstreamOp, DvcsError};
use crate::hash::{CommitId, Digest32, HashRef};
use crate::orset::{OrSetDelta, OrSetError, OrSetState};
use crate::store::{missing_refs, StoreError, ValueStore};

pub type PeerId = String;
pub type CrdtId = String;

/// Cap on deltas queued while waiting for fetched dependencies; the oldest
/// entry is dropped beyond this (it will be re-offered by gossip or healed
/// by a later state sync).
const MAX_PENDING: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum PeerError {
    #[error(transparent)]
    Dvcs(#[from] DvcsError),
    #[error(transparent)]
    OrSet(#[from] OrSetError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("malformed message: {0}")]
    Protocol(String),
    #[error("a peer cannot connect to itself")]
    SelfConnect,
    #[error("no such crdt: {0}")]
    NoSuchCrdt(CrdtId),
    #[error("crdt exists: {0}")]
    CrdtExists(CrdtId),
    #[error("operation does not match the crdt's type")]
    WrongCrdtType,
}

/// A hosted CRDT instance: the DVCS datatype or the OR-set, both behind the
/// same upstream/downstream/state-merge interface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Crdt {
    Dvcs(CdvcsState),
    OrSet(OrSetState),
}

impl Crdt {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn write(&self, w: &mut Writer) {
        match self {
            Crdt::Dvcs(s) => {
                w.u8(0);
                s.write(w);
            }
            Crdt::OrSet(s) => {
                w.u8(1);
                s.write(w);
            }
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(Crdt::Dvcs(CdvcsState::read(r)?)),
            1 => Ok(Crdt::OrSet(OrSetState::read(r)?)),
            t => Err(DecodeError::BadTag(t)),
        }
    }

    pub fn as_dvcs(&self) -> Option<&CdvcsState> {
        match self {
            Crdt::Dvcs(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_orset(&self) -> Option<&OrSetState> {
        match self {
            Crdt::OrSet(s) => Some(s),
            _ => None,
        }
    }

    fn state_merge(&mut self, other: &Crdt) -> Result<(), PeerError> {
        match (self, other) {
            (Crdt::Dvcs(a), Crdt::Dvcs(b)) => a.state_merge(b).map_err(PeerError::from),
            (Crdt::OrSet(a), Crdt::OrSet(b)) => {
                a.state_merge(b);
                Ok(())
            }
            _ => Err(PeerError::WrongCrdtType),
        }
    }
}

/// A downstream delta for either CRDT type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CrdtOp {
    Dvcs(DownstreamOp),
    OrSet(OrSetDelta),
}

impl CrdtOp {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn write(&self, w: &mut Writer) {
        match self {
            CrdtOp::Dvcs(op) => {
                w.u8(0);
                op.write(w);
            }
            CrdtOp::OrSet(d) => {
                w.u8(1);
                d.write(w);
            }
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(CrdtOp::Dvcs(DownstreamOp::read(r)?)),
            1 => Ok(CrdtOp::OrSet(OrSetDelta::read(r)?)),
            t => Err(DecodeError::BadTag(t)),
        }
    }

    /// Digest of the canonical encoding; used for duplicate detection.
    pub fn digest(&self) -> Digest32 {
        Digest32::of(&self.encode())
    }
}

/// Wire-level message body, one variant per kind tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MessageBody {
    Subscribe,
    PublishOp(CrdtOp),
    FetchRequest(Vec<HashRef>),
    FetchResponse(Vec<(HashRef, Vec<u8>)>),
    StateSyncRequest,
    StateSyncResponse(Crdt),
}

impl MessageBody {
    pub fn kind(&self) -> &'static str {
        match self {
            MessageBody::Subscribe => "subscribe",
            MessageBody::PublishOp(_) => "publish-op",
            MessageBody::FetchRequest(_) => "fetch",
            MessageBody::FetchResponse(_) => "fetch-response",
            MessageBody::StateSyncRequest => "state-sync-request",
            MessageBody::StateSyncResponse(_) => "state-sync-response",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerMessage {
    pub crdt_id: CrdtId,
    pub origin: PeerId,
    pub body: MessageBody,
}

impl PeerMessage {
    /// Length-prefixed canonical encoding with a one-byte kind tag.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match &self.body {
            MessageBody::Subscribe => w.u8(0),
            MessageBody::PublishOp(_) => w.u8(1),
            MessageBody::FetchRequest(_) => w.u8(2),
            MessageBody::FetchResponse(_) => w.u8(3),
            MessageBody::StateSyncRequest => w.u8(4),
            MessageBody::StateSyncResponse(_) => w.u8(5),
        }
        w.str(&self.crdt_id);
        w.str(&self.origin);
        match &self.body {
            MessageBody::Subscribe | MessageBody::StateSyncRequest => {}
            MessageBody::PublishOp(op) => op.write(&mut w),
            MessageBody::FetchRequest(refs) => {
                w.u32(refs.len() as u32);
                for r in refs {
                    w.digest(r);
                }
            }
            MessageBody::FetchResponse(values) => {
                w.u32(values.len() as u32);
                for (r, v) in values {
                    w.digest(r);
                    w.bytes(v);
                }
            }
            MessageBody::StateSyncResponse(state) => state.write(&mut w),
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let tag = r.u8()?;
        let crdt_id = r.str()?;
        let origin = r.str()?;
        let body = match tag {
            0 => MessageBody::Subscribe,
            1 => MessageBody::PublishOp(CrdtOp::read(&mut r)?),
            2 => {
                let n = r.u32()? as usize;
                let refs = (0..n).map(|_| r.digest()).collect::<Result<Vec<_>, _>>()?;
                MessageBody::FetchRequest(refs)
            }
            3 => {
                let n = r.u32()? as usize;
                let mut values = Vec::with_capacity(n);
                for _ in 0..n {
                    let d = r.digest()?;
                    let v = r.bytes()?;
                    values.push((d, v));
                }
                MessageBody::FetchResponse(values)
            }
            4 => MessageBody::StateSyncRequest,
            5 => MessageBody::StateSyncResponse(Crdt::read(&mut r)?),
            t => return Err(DecodeError::BadTag(t)),
        };
        r.done()?;
        Ok(PeerMessage { crdt_id, origin, body })
    }
}

pub enum HookDecision {
    Accept,
    Reject,
    Replace(CrdtOp),
}

pub struct HookCtx<'a> {
    pub crdt_id: &'a str,
    pub op: &'a CrdtOp,
    pub state: Option<&'a Crdt>,
    pub store: &'a dyn ValueStore,
}

/// Moderation hook: runs on each incoming remote delta, in registration
/// order, after its dependencies have been fetched but before it is applied,
/// so hooks can inspect the referenced commit bodies and values.
pub type PullHook = Box<dyn Fn(&HookCtx<'_>) -> HookDecision + Send>;

/// Upstream (at-source) calls exposed by the hosted CRDTs.
pub enum UpstreamCall {
    Commit { branch: BranchId, txn_refs: Vec<HashRef>, meta: BTreeMap<String, String> },
    CreateBranch { branch: BranchId, at: CommitId },
    Pull { branch: BranchId, remote_graph: CommitGraph, remote_head: CommitId },
    Merge { branch: BranchId, ordered_heads: Vec<CommitId>, txn_refs: Vec<HashRef>, meta: BTreeMap<String, String> },
    OrAdd { element: String },
    OrRemove { element: String },
}

pub struct UpstreamOutput {
    pub op: CrdtOp,
    /// Id of the commit created, for Commit and Merge calls.
    pub new_commit: Option<CommitId>,
}

#[derive(Debug, Default, Clone)]
pub struct PeerStats {
    pub applied_ops: u64,
    pub duplicate_ops: u64,
    pub rejected_by_hook: u64,
    pub state_merges: u64,
    /// Buckets rewritten by the most recent graph persistence.
    pub last_touched_buckets: usize,
    /// Applications attempted while a dependency was still missing. Stays
    /// zero: the apply path checks and refuses.
    pub missing_ref_violations: u64,
}

struct PendingEntry {
    crdt_id: CrdtId,
    origin: PeerId,
    item: PendingItem,
    requested: BTreeSet<HashRef>,
}

enum PendingItem {
    Op(CrdtOp),
    FullState(Crdt),
}

pub struct Peer {
    id: PeerId,
    /// What each neighbor wants to hear about.
    subscriptions: BTreeMap<PeerId, BTreeSet<CrdtId>>,
    crdts: BTreeMap<CrdtId, Crdt>,
    store: Box<dyn ValueStore>,
    pending: VecDeque<PendingEntry>,
    applied: BTreeSet<Digest32>,
    hooks: Vec<PullHook>,
    persist_graph: bool,
    pub stats: PeerStats,
}

impl Peer {
    pub fn new(id: impl Into<PeerId>, store: Box<dyn ValueStore>) -> Self {
        Peer {
            id: id.into(),
            subscriptions: BTreeMap::new(),
            crdts: BTreeMap::new(),
            store,
            pending: VecDeque::new(),
            applied: BTreeSet::new(),
            hooks: Vec::new(),
            persist_graph: false,
            stats: PeerStats::default(),
        }
    }

    /// Also persist commit-graph deltas into store buckets on every apply.
    pub fn with_graph_persistence(mut self) -> Self {
        self.persist_graph = true;
        self
    }

    pub fn add_hook(&mut self, hook: PullHook) {
        self.hooks.push(hook);
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn store(&self) -> &dyn ValueStore {
        self.store.as_ref()
    }

    pub fn crdt(&self, id: &str) -> Option<&Crdt> {
        self.crdts.get(id)
    }

    pub fn crdt_ids(&self) -> impl Iterator<Item = &CrdtId> {
        self.crdts.keys()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Stores a raw transaction payload, returning its ref.
    pub fn put_value(&mut self, value: &[u8]) -> Result<HashRef, PeerError> {
        Ok(self.store.put(value)?)
    }

    pub fn get_value(&self, r: &HashRef) -> Result<Vec<u8>, PeerError> {
        Ok(self.store.get(r)?)
    }

    /// Creates a DVCS instance with a root commit.
    pub fn create_dvcs(
        &mut self,
        crdt_id: impl Into<CrdtId>,
        root_node: &CommitNode,
        branch: impl Into<BranchId>,
    ) -> Result<CommitId, PeerError> {
        let crdt_id = crdt_id.into();
        if self.crdts.contains_key(&crdt_id) {
            return Err(PeerError::CrdtExists(crdt_id));
        }
        for r in &root_node.txn_refs {
            if !self.store.has(r) {
                return Err(PeerError::Store(StoreError::NotFound(*r)));
            }
        }
        let state = CdvcsState::new(root_node, branch)?;
        self.store.put(&root_node.encode())?;
        if self.persist_graph {
            let touched = self.store.persist_graph_delta(state.graph())?;
            self.stats.last_touched_buckets = touched.len();
        }
        let root = root_node.id();
        self.crdts.insert(crdt_id, Crdt::Dvcs(state));
        Ok(root)
    }

    pub fn create_orset(&mut self, crdt_id: impl Into<CrdtId>) -> Result<(), PeerError> {
        let crdt_id = crdt_id.into();
        if self.crdts.contains_key(&crdt_id) {
            return Err(PeerError::CrdtExists(crdt_id));
        }
        self.crdts.insert(crdt_id, Crdt::OrSet(OrSetState::new()));
        Ok(())
    }

    /// Executes an upstream call against a local CRDT, applies the resulting
    /// delta locally and returns the broadcast list for subscribed
    /// neighbors.
    pub fn local_upstream(
        &mut self,
        crdt_id: &str,
        call: UpstreamCall,
    ) -> Result<(UpstreamOutput, Vec<(PeerId, PeerMessage)>), PeerError> {
        let crdt = self
            .crdts
            .get_mut(crdt_id)
            .ok_or_else(|| PeerError::NoSuchCrdt(crdt_id.to_string()))?;
        let output = match (crdt, call) {
            (Crdt::Dvcs(state), UpstreamCall::Commit { branch, txn_refs, meta }) => {
                for r in &txn_refs {
                    if !self.store.has(r) {
                        return Err(PeerError::Store(StoreError::NotFound(*r)));
                    }
                }
                let head = state.single_head(&branch)?;
                let node = CommitNode { parents: vec![head], txn_refs, meta };
                let op = state.commit(&branch, &node)?;
                self.store.put(&node.encode())?;
                UpstreamOutput { op: CrdtOp::Dvcs(op), new_commit: Some(node.id()) }
            }
            (Crdt::Dvcs(state), UpstreamCall::CreateBranch { branch, at }) => {
                let op = state.create_branch(branch, at)?;
                UpstreamOutput { op: CrdtOp::Dvcs(op), new_commit: None }
            }
            (Crdt::Dvcs(state), UpstreamCall::Pull { branch, remote_graph, remote_head }) => {
                // a pulled subgraph must already be backed by fetched values
                let op = state.pull(&branch, &remote_graph, remote_head)?;
                for (id, _) in op.added_graph.iter() {
                    if !self.store.has(id) {
                        return Err(PeerError::Store(StoreError::NotFound(*id)));
                    }
                }
                UpstreamOutput { op: CrdtOp::Dvcs(op), new_commit: None }
            }
            (Crdt::Dvcs(state), UpstreamCall::Merge { branch, ordered_heads, txn_refs, meta }) => {
                let (op, node) = state.merge(&branch, &ordered_heads, txn_refs, meta)?;
                self.store.put(&node.encode())?;
                UpstreamOutput { op: CrdtOp::Dvcs(op), new_commit: Some(node.id()) }
            }
            (Crdt::OrSet(state), UpstreamCall::OrAdd { element }) => {
                let delta = state.add(element, &self.id);
                UpstreamOutput { op: CrdtOp::OrSet(delta), new_commit: None }
            }
            (Crdt::OrSet(state), UpstreamCall::OrRemove { element }) => {
                let delta = state.remove(&element)?;
                UpstreamOutput { op: CrdtOp::OrSet(delta), new_commit: None }
            }
            _ => return Err(PeerError::WrongCrdtType),
        };
        // the upstream path already applied the delta to the state
        if self.persist_graph {
            if let CrdtOp::Dvcs(op) = &output.op {
                let touched = self.store.persist_graph_delta(&op.added_graph)?;
                self.stats.last_touched_buckets = touched.len();
            }
        }
        self.applied.insert(output.op.digest());
        self.stats.applied_ops += 1;
        let broadcast = self.broadcast_op(crdt_id, &output.op, None);
        Ok((output, broadcast))
    }

    /// Handles one inbound message, returning the messages to send out.
    pub fn handle_message(
        &mut self,
        msg: PeerMessage,
    ) -> Result<Vec<(PeerId, PeerMessage)>, PeerError> {
        let PeerMessage { crdt_id, origin, body } = msg;
        if origin == self.id {
            return Err(PeerError::Protocol("message from self".into()));
        }
        match body {
            MessageBody::Subscribe => {
                self.subscriptions.entry(origin.clone()).or_default().insert(crdt_id.clone());
                // pull the announcer's state for this crdt
                Ok(vec![(
                    origin.clone(),
                    self.message(&crdt_id, MessageBody::StateSyncRequest),
                )])
            }
            MessageBody::StateSyncRequest => {
                // a sync request implies interest in future ops
                self.subscriptions.entry(origin.clone()).or_default().insert(crdt_id.clone());
                match self.crdts.get(&crdt_id) {
                    Some(crdt) => Ok(vec![(
                        origin.clone(),
                        self.message(&crdt_id, MessageBody::StateSyncResponse(crdt.clone())),
                    )]),
                    None => Ok(Vec::new()),
                }
            }
            MessageBody::StateSyncResponse(state) => self.ingest_full_state(crdt_id, origin, state),
            MessageBody::PublishOp(op) => self.ingest_op(crdt_id, origin, op),
            MessageBody::FetchRequest(refs) => {
                let mut values = Vec::new();
                for r in &refs {
                    if let Ok(v) = self.store.get(r) {
                        values.push((*r, v));
                    }
                }
                Ok(vec![(
                    origin.clone(),
                    self.message(&crdt_id, MessageBody::FetchResponse(values)),
                )])
            }
            MessageBody::FetchResponse(values) => {
                for (r, v) in values {
                    if Digest32::of(&v) != r {
                        // tampered or corrupted value: drop it, keep the op
                        // pending; a later fetch may still succeed
                        continue;
                    }
                    self.store.put(&v)?;
                }
                self.drain_pending()
            }
        }
    }

    fn message(&self, crdt_id: &str, body: MessageBody) -> PeerMessage {
        PeerMessage { crdt_id: crdt_id.to_string(), origin: self.id.clone(), body }
    }

    fn broadcast_op(
        &self,
        crdt_id: &str,
        op: &CrdtOp,
        except: Option<&PeerId>,
    ) -> Vec<(PeerId, PeerMessage)> {
        self.subscriptions
            .iter()
            .filter(|(peer, ids)| Some(*peer) != except && ids.contains(crdt_id))
            .map(|(peer, _)| {
                (peer.clone(), self.message(crdt_id, MessageBody::PublishOp(op.clone())))
            })
            .collect()
    }

    fn ingest_op(
        &mut self,
        crdt_id: CrdtId,
        origin: PeerId,
        op: CrdtOp,
    ) -> Result<Vec<(PeerId, PeerMessage)>, PeerError> {
        if self.applied.contains(&op.digest()) {
            self.stats.duplicate_ops += 1;
            return Ok(Vec::new());
        }
        let mut entry = PendingEntry { crdt_id, origin, item: PendingItem::Op(op), requested: BTreeSet::new() };
        let missing = self.missing_for(&mut entry)?;
        if missing.is_empty() {
            self.apply_entry(entry)
        } else {
            self.enqueue_pending(entry, missing)
        }
    }

    fn ingest_full_state(
        &mut self,
        crdt_id: CrdtId,
        origin: PeerId,
        state: Crdt,
    ) -> Result<Vec<(PeerId, PeerMessage)>, PeerError> {
        let mut entry = PendingEntry {
            crdt_id,
            origin,
            item: PendingItem::FullState(state),
            requested: BTreeSet::new(),
        };
        let missing = self.missing_for(&mut entry)?;
        if missing.is_empty() {
            self.apply_entry(entry)
        } else {
            self.enqueue_pending(entry, missing)
        }
    }

    fn enqueue_pending(
        &mut self,
        mut entry: PendingEntry,
        missing: BTreeSet<HashRef>,
    ) -> Result<Vec<(PeerId, PeerMessage)>, PeerError> {
        let req: Vec<HashRef> = missing.difference(&entry.requested).copied().collect();
        entry.requested.extend(req.iter().copied());
        let msg = (
            entry.origin.clone(),
            self.message(&entry.crdt_id, MessageBody::FetchRequest(req)),
        );
        self.pending.push_back(entry);
        if self.pending.len() > MAX_PENDING {
            self.pending.pop_front();
        }
        Ok(vec![msg])
    }

    /// Dependencies still missing for a queued delta or full state. For DVCS
    /// deltas this also walks parents newly learned from fetched node bodies
    /// into the delta's graph fragment, so the closure grows toward the root
    /// until everything is locally known.
    fn missing_for(&self, entry: &mut PendingEntry) -> Result<BTreeSet<HashRef>, PeerError> {
        let mut missing = BTreeSet::new();
        match &mut entry.item {
            PendingItem::Op(CrdtOp::Dvcs(op)) => {
                let local_graph = self.crdts.get(&entry.crdt_id).and_then(|c| c.as_dvcs()).map(|s| s.graph());
                let locally_known = |id: &CommitId| local_graph.is_some_and(|g| g.contains(id));
                // grow the fragment with fetched parents until closed
                loop {
                    let mut grew = false;
                    let mut unresolved: Vec<CommitId> = Vec::new();
                    for (_, ps) in op.added_graph.iter() {
                        for p in ps {
                            if !op.added_graph.contains(p) && !locally_known(p) {
                                unresolved.push(*p);
                            }
                        }
                    }
                    for h in &op.added_heads {
                        if !op.added_graph.contains(h) && !locally_known(h) {
                            unresolved.push(*h);
                        }
                    }
                    for p in unresolved {
                        if self.store.has(&p) {
                            if let Ok(node) = CommitNode::decode(&self.store.get(&p)?) {
                                op.added_graph.insert(p, node.parents.clone());
                                grew = true;
                            } else {
                                missing.insert(p);
                            }
                        } else {
                            missing.insert(p);
                        }
                    }
                    if !grew {
                        break;
                    }
                    missing.clear();
                }
                missing.extend(missing_refs(self.store.as_ref(), op)?);
            }
            PendingItem::Op(CrdtOp::OrSet(_)) => {}
            PendingItem::FullState(Crdt::Dvcs(state)) => {
                // nodes already in the local graph were backed by the store
                // when they were applied; only audit genuinely new ones
                let local_graph =
                    self.crdts.get(&entry.crdt_id).and_then(|c| c.as_dvcs()).map(|s| s.graph());
                for (id, _) in state.graph().iter() {
                    if local_graph.is_some_and(|g| g.contains(id)) {
                        continue;
                    }
                    if !self.store.has(id) {
                        missing.insert(*id);
                        continue;
                    }
                    if let Ok(node) = CommitNode::decode(&self.store.get(id)?) {
                        for r in &node.txn_refs {
                            if !self.store.has(r) {
                                missing.insert(*r);
                            }
                        }
                    }
                }
            }
            PendingItem::FullState(Crdt::OrSet(_)) => {}
        }
        Ok(missing)
    }

    fn apply_entry(
        &mut self,
        entry: PendingEntry,
    ) -> Result<Vec<(PeerId, PeerMessage)>, PeerError> {
        match entry.item {
            PendingItem::Op(op) => {
                // atomicity guard: never apply with dependencies missing
                if let CrdtOp::Dvcs(d) = &op {
                    if !missing_refs(self.store.as_ref(), d)?.is_empty() {
                        self.stats.missing_ref_violations += 1;
                        return Err(PeerError::Protocol("apply with missing refs".into()));
                    }
                }
                // moderation runs with all dependencies resolved, before any
                // state change
                let mut op = op;
                let mut rejected = false;
                for hook in &self.hooks {
                    let decision = hook(&HookCtx {
                        crdt_id: &entry.crdt_id,
                        op: &op,
                        state: self.crdts.get(&entry.crdt_id),
                        store: self.store.as_ref(),
                    });
                    match decision {
                        HookDecision::Accept => {}
                        HookDecision::Reject => {
                            rejected = true;
                            break;
                        }
                        HookDecision::Replace(new_op) => op = new_op,
                    }
                }
                if rejected {
                    self.stats.rejected_by_hook += 1;
                    return Ok(Vec::new());
                }
                let crdt = self
                    .crdts
                    .entry(entry.crdt_id.clone())
                    .or_insert_with(|| match &op {
                        CrdtOp::Dvcs(_) => Crdt::Dvcs(CdvcsState::empty()),
                        CrdtOp::OrSet(_) => Crdt::OrSet(OrSetState::new()),
                    });
                match (crdt, &op) {
                    (Crdt::Dvcs(state), CrdtOp::Dvcs(d)) => state.apply_downstream(d)?,
                    (Crdt::OrSet(state), CrdtOp::OrSet(d)) => state.apply_downstream(d),
                    _ => return Err(PeerError::WrongCrdtType),
                }
                if self.persist_graph {
                    if let CrdtOp::Dvcs(d) = &op {
                        let touched = self.store.persist_graph_delta(&d.added_graph)?;
                        self.stats.last_touched_buckets = touched.len();
                    }
                }
                self.applied.insert(op.digest());
                self.stats.applied_ops += 1;
                Ok(self.broadcast_op(&entry.crdt_id, &op, Some(&entry.origin)))
            }
            PendingItem::FullState(state) => {
                match self.crdts.get_mut(&entry.crdt_id) {
                    Some(crdt) => crdt.state_merge(&state)?,
                    None => {
                        self.crdts.insert(entry.crdt_id.clone(), state);
                    }
                }
                self.stats.state_merges += 1;
                if self.persist_graph {
                    if let Some(Crdt::Dvcs(s)) = self.crdts.get(&entry.crdt_id) {
                        let graph = s.graph().clone();
                        let touched = self.store.persist_graph_delta(&graph)?;
                        self.stats.last_touched_buckets = touched.len();
                    }
                }
                Ok(Vec::new())
            }
        }
    }

    /// Re-examines queued deltas after new values arrived; applies those
    /// whose dependencies completed and re-fetches newly discovered ones.
    fn drain_pending(&mut self) -> Result<Vec<(PeerId, PeerMessage)>, PeerError> {
        let mut out = Vec::new();
        loop {
            let mut progressed = false;
            let mut still_pending = VecDeque::new();
            while let Some(mut entry) = self.pending.pop_front() {
                let missing = self.missing_for(&mut entry)?;
                if missing.is_empty() {
                    out.extend(self.apply_entry(entry)?);
                    progressed = true;
                } else {
                    let new_refs: Vec<HashRef> =
                        missing.difference(&entry.requested).copied().collect();
                    if !new_refs.is_empty() {
                        entry.requested.extend(new_refs.iter().copied());
                        out.push((
                            entry.origin.clone(),
                            self.message(&entry.crdt_id, MessageBody::FetchRequest(new_refs)),
                        ));
                    }
                    still_pending.push_back(entry);
                }
            }
            self.pending = still_pending;
            if !progressed {
                break;
            }
        }
        Ok(out)
    }
}

/// Connection plan: mutual per-crdt subscriptions. Each Subscribe triggers a
/// state-sync exchange at the receiver, so after quiescence both peers hold
/// the merge of their prior states.
pub fn connect_plan(a: &Peer, b: &Peer) -> Result<Vec<(PeerId, PeerId, PeerMessage)>, PeerError> {
    if a.id == b.id {
        return Err(PeerError::SelfConnect);
    }
    let mut plan = Vec::new();
    for id in a.crdt_ids() {
        plan.push((a.id.clone(), b.id.clone(), a.message(id, MessageBody::Subscribe)));
    }
    for id in b.crdt_ids() {
        plan.push((b.id.clone(), a.id.clone(), b.message(id, MessageBody::Subscribe)));
    }
    Ok(plan)
}
