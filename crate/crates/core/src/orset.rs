//! Observed-remove set with add-wins semantics.
//!
//! Shares the CRDT interface of the DVCS datatype: upstream calls emit an
//! additive [`OrSetDelta`], downstream application and
//! [`OrSetState::state_merge`] are semilattice joins. Adds tag elements with
//! globally unique `(replica, counter)` pairs; a remove tombstones only the
//! tags observed at the source, so a concurrent add always survives.

use std::collections::{BTreeMap, BTreeSet};

use crate::codec::{DecodeError, Reader, Writer};

pub type Element = String;

/// Globally unique add tag: issuing replica plus a per-replica counter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Tag {
    pub replica: String,
    pub counter: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum OrSetError {
    #[error("element not present: {0}")]
    NotPresent(Element),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OrSetState {
    /// Live tags per element. Disjoint from `tombstones` per element.
    entries: BTreeMap<Element, BTreeSet<Tag>>,
    /// Removed tags per element.
    tombstones: BTreeMap<Element, BTreeSet<Tag>>,
}

/// Additive delta: freshly added tags and newly tombstoned tags.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OrSetDelta {
    pub adds: BTreeMap<Element, BTreeSet<Tag>>,
    pub removes: BTreeMap<Element, BTreeSet<Tag>>,
}

impl OrSetState {
    pub fn new() -> Self {
        Self::default()
    }

    fn next_counter(&self, replica: &str) -> u64 {
        let max = self
            .entries
            .values()
            .chain(self.tombstones.values())
            .flatten()
            .filter(|t| t.replica == replica)
            .map(|t| t.counter)
            .max();
        max.map_or(0, |m| m + 1)
    }

    /// Adds an element under a fresh tag.
    pub fn add(&mut self, element: impl Into<Element>, replica: &str) -> OrSetDelta {
        let element = element.into();
        let tag = Tag { replica: replica.to_string(), counter: self.next_counter(replica) };
        let mut delta = OrSetDelta::default();
        delta.adds.entry(element).or_default().insert(tag);
        self.apply_downstream(&delta);
        delta
    }

    /// Removes an element by tombstoning all currently observed tags.
    pub fn remove(&mut self, element: &str) -> Result<OrSetDelta, OrSetError> {
        let live = match self.entries.get(element) {
            Some(tags) if !tags.is_empty() => tags.clone(),
            _ => return Err(OrSetError::NotPresent(element.to_string())),
        };
        let mut delta = OrSetDelta::default();
        delta.removes.insert(element.to_string(), live);
        self.apply_downstream(&delta);
        Ok(delta)
    }

    /// Applies a delta: tombstones dominate their own tags, so a tag in both
    /// halves ends up removed. Idempotent and order independent.
    pub fn apply_downstream(&mut self, delta: &OrSetDelta) {
        for (el, tags) in &delta.adds {
            let dead = self.tombstones.get(el);
            let live = self.entries.entry(el.clone()).or_default();
            for t in tags {
                if dead.map_or(true, |d| !d.contains(t)) {
                    live.insert(t.clone());
                }
            }
        }
        for (el, tags) in &delta.removes {
            let dead = self.tombstones.entry(el.clone()).or_default();
            for t in tags {
                dead.insert(t.clone());
            }
            if let Some(live) = self.entries.get_mut(el) {
                for t in tags {
                    live.remove(t);
                }
            }
        }
        self.prune();
    }

    /// Semilattice join with another full state.
    pub fn state_merge(&mut self, other: &OrSetState) {
        for (el, tags) in &other.tombstones {
            self.tombstones.entry(el.clone()).or_default().extend(tags.iter().cloned());
        }
        for (el, tags) in &other.entries {
            let dead = self.tombstones.get(el);
            let live = self.entries.entry(el.clone()).or_default();
            for t in tags {
                if dead.map_or(true, |d| !d.contains(t)) {
                    live.insert(t.clone());
                }
            }
        }
        // own live tags may now be covered by the other's tombstones
        for (el, dead) in &self.tombstones {
            if let Some(live) = self.entries.get_mut(el) {
                live.retain(|t| !dead.contains(t));
            }
        }
        self.prune();
    }

    fn prune(&mut self) {
        self.entries.retain(|_, tags| !tags.is_empty());
    }

    pub fn contains(&self, element: &str) -> bool {
        self.entries.get(element).is_some_and(|tags| !tags.is_empty())
    }

    pub fn elements(&self) -> BTreeSet<Element> {
        self.entries
            .iter()
            .filter(|(_, tags)| !tags.is_empty())
            .map(|(el, _)| el.clone())
            .collect()
    }

    pub fn live_tags(&self, element: &str) -> Option<&BTreeSet<Tag>> {
        self.entries.get(element)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn write(&self, w: &mut Writer) {
        write_tag_map(w, &self.entries);
        write_tag_map(w, &self.tombstones);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let entries = read_tag_map(r)?;
        let tombstones = read_tag_map(r)?;
        Ok(OrSetState { entries, tombstones })
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let s = Self::read(&mut r)?;
        r.done()?;
        Ok(s)
    }
}

impl OrSetDelta {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn write(&self, w: &mut Writer) {
        write_tag_map(w, &self.adds);
        write_tag_map(w, &self.removes);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let adds = read_tag_map(r)?;
        let removes = read_tag_map(r)?;
        Ok(OrSetDelta { adds, removes })
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let d = Self::read(&mut r)?;
        r.done()?;
        Ok(d)
    }
}

fn write_tag_map(w: &mut Writer, m: &BTreeMap<Element, BTreeSet<Tag>>) {
    w.u32(m.len() as u32);
    for (el, tags) in m {
        w.str(el);
        w.u32(tags.len() as u32);
        for t in tags {
            w.str(&t.replica);
            w.u64(t.counter);
        }
    }
}

fn read_tag_map(r: &mut Reader<'_>) -> Result<BTreeMap<Element, BTreeSet<Tag>>, DecodeError> {
    let n = r.u32()? as usize;
    let mut m = BTreeMap::new();
    for _ in 0..n {
        let el = r.str()?;
        let nt = r.u32()? as usize;
        let mut tags = BTreeSet::new();
        for _ in 0..nt {
            let replica = r.str()?;
            let counter = r.u64()?;
            tags.insert(Tag { replica, counter });
        }
        m.insert(el, tags);
    }
    Ok(m)
}
