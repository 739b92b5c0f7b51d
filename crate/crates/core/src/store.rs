//! Content-addressed immutable value store.
//!
//! Values are keyed by the SHA-256 of their bytes, so writes are idempotent,
//! identical payloads are stored once regardless of which datatype references
//! them, and reads verify integrity. Commit-graph metadata is persisted in
//! prefix buckets (first 12 bits of the commit id) so that persisting a
//! small delta rewrites a bounded number of buckets no matter how large the
//! graph has grown.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use crate::codec::{Reader, Writer};
use crate::dvcs::{CommitGraph, CommitNode, DownstreamOp};
use crate::hash::{CommitId, Digest32, HashRef};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("value not found: {0:?}")]
    NotFound(HashRef),
    #[error("stored value does not match its digest: {0:?}")]
    Integrity(HashRef),
    #[error("storage backend failure: {0}")]
    Storage(#[from] std::io::Error),
    #[error("corrupt bucket file {0}")]
    CorruptBucket(String),
}

/// Bucket key: the first 12 bits of a commit id.
pub type BucketKey = u16;

pub fn bucket_key(id: &CommitId) -> BucketKey {
    let b = id.as_bytes();
    ((b[0] as u16) << 4) | ((b[1] as u16) >> 4)
}

pub trait ValueStore: Send {
    /// Stores a value and returns its digest. Idempotent.
    fn put(&mut self, value: &[u8]) -> Result<HashRef, StoreError>;

    /// Reads a value back, verifying its digest.
    fn get(&self, r: &HashRef) -> Result<Vec<u8>, StoreError>;

    fn has(&self, r: &HashRef) -> bool;

    /// Number of distinct values held.
    fn value_count(&self) -> usize;

    /// Persists a graph fragment into its prefix buckets, returning the set
    /// of bucket keys that were rewritten.
    fn persist_graph_delta(&mut self, delta: &CommitGraph) -> Result<BTreeSet<BucketKey>, StoreError>;
}

/// Every commit-node or transaction ref named by an op that is absent from
/// the store. An op must not be applied while this is non-empty.
pub fn missing_refs(
    store: &dyn ValueStore,
    op: &DownstreamOp,
) -> Result<BTreeSet<HashRef>, StoreError> {
    let mut missing = BTreeSet::new();
    for (id, _) in op.added_graph.iter() {
        if !store.has(id) {
            missing.insert(*id);
            continue;
        }
        let bytes = store.get(id)?;
        if let Ok(node) = CommitNode::decode(&bytes) {
            for r in &node.txn_refs {
                if !store.has(r) {
                    missing.insert(*r);
                }
            }
        }
    }
    Ok(missing)
}

/// In-memory backend.
#[derive(Debug, Default)]
pub struct MemStore {
    values: BTreeMap<HashRef, Vec<u8>>,
    buckets: BTreeMap<BucketKey, BTreeMap<CommitId, Vec<CommitId>>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ValueStore for MemStore {
    fn put(&mut self, value: &[u8]) -> Result<HashRef, StoreError> {
        let r = Digest32::of(value);
        self.values.entry(r).or_insert_with(|| value.to_vec());
        Ok(r)
    }

    fn get(&self, r: &HashRef) -> Result<Vec<u8>, StoreError> {
        let v = self.values.get(r).ok_or(StoreError::NotFound(*r))?;
        if Digest32::of(v) != *r {
            return Err(StoreError::Integrity(*r));
        }
        Ok(v.clone())
    }

    fn has(&self, r: &HashRef) -> bool {
        self.values.contains_key(r)
    }

    fn value_count(&self) -> usize {
        self.values.len()
    }

    fn persist_graph_delta(&mut self, delta: &CommitGraph) -> Result<BTreeSet<BucketKey>, StoreError> {
        let mut touched = BTreeSet::new();
        for (id, ps) in delta.iter() {
            let key = bucket_key(id);
            self.buckets.entry(key).or_default().insert(*id, ps.to_vec());
            touched.insert(key);
        }
        Ok(touched)
    }
}

/// File-backed backend. Values live under `values/<first byte hex>/<rest>`,
/// graph buckets under `buckets/<3 hex digits>` with a length-prefixed
/// sorted entry encoding.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    value_count: usize,
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("values"))?;
        fs::create_dir_all(root.join("buckets"))?;
        let mut count = 0;
        for shard in fs::read_dir(root.join("values"))? {
            count += fs::read_dir(shard?.path())?.count();
        }
        Ok(FileStore { root, value_count: count })
    }

    fn value_path(&self, r: &HashRef) -> PathBuf {
        let hex = r.to_hex();
        self.root.join("values").join(&hex[..2]).join(&hex[2..])
    }

    fn bucket_path(&self, key: BucketKey) -> PathBuf {
        self.root.join("buckets").join(format!("{key:03x}"))
    }

    fn read_bucket(&self, key: BucketKey) -> Result<BTreeMap<CommitId, Vec<CommitId>>, StoreError> {
        let path = self.bucket_path(key);
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        let bytes = fs::read(&path)?;
        let mut r = Reader::new(&bytes);
        let graph = CommitGraph::read(&mut r)
            .and_then(|g| r.done().map(|_| g))
            .map_err(|_| StoreError::CorruptBucket(format!("{key:03x}")))?;
        Ok(graph.iter().map(|(id, ps)| (*id, ps.to_vec())).collect())
    }

    fn write_bucket(
        &self,
        key: BucketKey,
        entries: &BTreeMap<CommitId, Vec<CommitId>>,
    ) -> Result<(), StoreError> {
        let mut w = Writer::new();
        let graph: CommitGraph = entries.iter().map(|(id, ps)| (*id, ps.clone())).collect();
        graph.write(&mut w);
        let tmp = self.bucket_path(key).with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&w.finish())?;
        f.flush()?;
        fs::rename(&tmp, self.bucket_path(key))?;
        Ok(())
    }

    /// Loads the full persisted graph from all buckets.
    pub fn load_graph(&self) -> Result<CommitGraph, StoreError> {
        let mut graph = CommitGraph::new();
        for entry in fs::read_dir(self.root.join("buckets"))? {
            let path = entry?.path();
            if path.extension().is_some() {
                continue;
            }
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            let key = u16::from_str_radix(&name, 16)
                .map_err(|_| StoreError::CorruptBucket(name.clone()))?;
            for (id, ps) in self.read_bucket(key)? {
                graph.insert(id, ps);
            }
        }
        Ok(graph)
    }
}

impl ValueStore for FileStore {
    fn put(&mut self, value: &[u8]) -> Result<HashRef, StoreError> {
        let r = Digest32::of(value);
        let path = self.value_path(&r);
        if !path.exists() {
            fs::create_dir_all(path.parent().unwrap())?;
            fs::write(&path, value)?;
            self.value_count += 1;
        }
        Ok(r)
    }

    fn get(&self, r: &HashRef) -> Result<Vec<u8>, StoreError> {
        let path = self.value_path(r);
        let bytes = fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                StoreError::NotFound(*r)
            } else {
                StoreError::Storage(e)
            }
        })?;
        if Digest32::of(&bytes) != *r {
            return Err(StoreError::Integrity(*r));
        }
        Ok(bytes)
    }

    fn has(&self, r: &HashRef) -> bool {
        self.value_path(r).exists()
    }

    fn value_count(&self) -> usize {
        self.value_count
    }

    fn persist_graph_delta(&mut self, delta: &CommitGraph) -> Result<BTreeSet<BucketKey>, StoreError> {
        let mut by_bucket: BTreeMap<BucketKey, Vec<(CommitId, Vec<CommitId>)>> = BTreeMap::new();
        for (id, ps) in delta.iter() {
            by_bucket.entry(bucket_key(id)).or_default().push((*id, ps.to_vec()));
        }
        let mut touched = BTreeSet::new();
        for (key, entries) in by_bucket {
            let mut bucket = self.read_bucket(key)?;
            for (id, ps) in entries {
                bucket.insert(id, ps);
            }
            self.write_bucket(key, &bucket)?;
            touched.insert(key);
        }
        Ok(touched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn backends() -> Vec<(&'static str, Box<dyn ValueStore>, Option<tempfile::TempDir>)> {
        let dir = tempfile::tempdir().unwrap();
        let fs_store = FileStore::open(dir.path()).unwrap();
        vec![
            ("mem", Box::new(MemStore::new()) as Box<dyn ValueStore>, None),
            ("file", Box::new(fs_store), Some(dir)),
        ]
    }

    #[test]
    fn put_get_roundtrip() {
        for (name, mut s, _guard) in backends() {
            let r = s.put(b"hello").unwrap();
            assert_eq!(s.get(&r).unwrap(), b"hello", "{name}");
            assert!(s.has(&r));
        }
    }

    #[test]
    fn put_is_idempotent() {
        for (name, mut s, _guard) in backends() {
            let r1 = s.put(b"dup").unwrap();
            let r2 = s.put(b"dup").unwrap();
            assert_eq!(r1, r2, "{name}");
            assert_eq!(s.value_count(), 1, "{name}");
        }
    }

    #[test]
    fn get_unknown_is_not_found() {
        for (name, s, _guard) in backends() {
            let bogus = Digest32::of(b"nothing stored");
            assert!(matches!(s.get(&bogus), Err(StoreError::NotFound(_))), "{name}");
        }
    }

    #[test]
    fn shared_payload_is_stored_once() {
        for (name, mut s, _guard) in backends() {
            // two datatypes referencing the same payload
            let r1 = s.put(b"shared txn payload").unwrap();
            let r2 = s.put(b"shared txn payload").unwrap();
            assert_eq!(r1, r2);
            assert_eq!(s.value_count(), 1, "{name}");
        }
    }

    #[test]
    fn tampered_file_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = FileStore::open(dir.path()).unwrap();
        let r = s.put(b"precious").unwrap();
        let hex = r.to_hex();
        let path = dir.path().join("values").join(&hex[..2]).join(&hex[2..]);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(s.get(&r), Err(StoreError::Integrity(_))));
    }

    #[test]
    fn missing_refs_of_fully_local_op_is_empty() {
        let mut s = MemStore::new();
        let payload = s.put(b"txn").unwrap();
        let node = CommitNode::new(Vec::new(), vec![payload]);
        s.put(&node.encode()).unwrap();
        let mut g = CommitGraph::new();
        g.insert(node.id(), Vec::new());
        let op = DownstreamOp {
            branch: "master".into(),
            added_graph: g,
            added_heads: BTreeSet::from([node.id()]),
        };
        assert!(missing_refs(&s, &op).unwrap().is_empty());
    }

    #[test]
    fn missing_refs_reports_absent_node_and_payload() {
        let mut s = MemStore::new();
        let payload_ref = Digest32::of(b"txn payload not stored");
        let stored_node = CommitNode::new(Vec::new(), vec![payload_ref]);
        s.put(&stored_node.encode()).unwrap();
        let absent_node = CommitNode::new(vec![stored_node.id()], Vec::new());
        let mut g = CommitGraph::new();
        g.insert(stored_node.id(), Vec::new());
        g.insert(absent_node.id(), absent_node.parents.clone());
        let op = DownstreamOp {
            branch: "master".into(),
            added_graph: g,
            added_heads: BTreeSet::from([absent_node.id()]),
        };
        let missing = missing_refs(&s, &op).unwrap();
        assert_eq!(missing, BTreeSet::from([payload_ref, absent_node.id()]));
    }

    #[test]
    fn single_commit_delta_touches_one_bucket() {
        for (name, mut s, _guard) in backends() {
            let node = CommitNode::root();
            let mut g = CommitGraph::new();
            g.insert(node.id(), Vec::new());
            let touched = s.persist_graph_delta(&g).unwrap();
            assert_eq!(touched.len(), 1, "{name}");
            assert_eq!(*touched.iter().next().unwrap(), bucket_key(&node.id()));
        }
    }

    #[test]
    fn empty_delta_touches_nothing() {
        for (name, mut s, _guard) in backends() {
            assert!(s.persist_graph_delta(&CommitGraph::new()).unwrap().is_empty(), "{name}");
        }
    }

    #[test]
    fn repersisting_same_delta_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = FileStore::open(dir.path()).unwrap();
        let node = CommitNode::root();
        let mut g = CommitGraph::new();
        g.insert(node.id(), Vec::new());
        s.persist_graph_delta(&g).unwrap();
        let first = s.load_graph().unwrap();
        s.persist_graph_delta(&g).unwrap();
        assert_eq!(s.load_graph().unwrap(), first);
        assert_eq!(first.len(), 1);
    }

    #[test]
    fn bucket_files_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let root = CommitNode::root();
        let child = CommitNode::new(vec![root.id()], Vec::new());
        {
            let mut s = FileStore::open(dir.path()).unwrap();
            let g: CommitGraph = [
                (root.id(), Vec::new()),
                (child.id(), child.parents.clone()),
            ]
            .into_iter()
            .collect();
            s.persist_graph_delta(&g).unwrap();
            s.put(b"payload").unwrap();
        }
        let s = FileStore::open(dir.path()).unwrap();
        assert_eq!(s.value_count(), 1);
        let g = s.load_graph().unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.parents(&child.id()), Some(&[root.id()][..]));
    }
}
