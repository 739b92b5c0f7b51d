//! Deterministic discrete-event network simulator.
//!
//! Peers run as sequential state machines inside a single-threaded event
//! loop. Time is logical ticks; per-message latency is sampled from a seeded
//! RNG, so identical (seed, config, script) triples produce identical traces
//! and final states. Partitions withhold messages crossing the cut; healing
//! a partition schedules a mandatory state-sync across previously severed
//! links, so drops and partitions only defer novelty.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hash::Digest32;
use crate::peer::{connect_plan, CrdtId, MessageBody, Peer, PeerError, PeerId, PeerMessage};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("tick budget exhausted with {remaining} events still queued")]
    NonQuiescent { remaining: usize },
    #[error(transparent)]
    Peer(#[from] PeerError),
}

/// Per-link latency bounds in ticks, inclusive. Minimum must be at least 1
/// so logical time always advances.
#[derive(Debug, Clone, Copy)]
pub struct LatencyBounds {
    pub min: u64,
    pub max: u64,
}

impl Default for LatencyBounds {
    fn default() -> Self {
        LatencyBounds { min: 1, max: 1 }
    }
}

/// A scheduled bipartition: peers in `side_a` cannot exchange messages with
/// the rest during [start, end).
#[derive(Debug, Clone)]
pub struct Partition {
    pub start: u64,
    pub end: u64,
    pub side_a: BTreeSet<PeerId>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub latency: LatencyBounds,
    /// Probability that a gossip message (Subscribe/PublishOp) is lost.
    /// Request-response traffic (fetch, state sync) is retried transport in
    /// practice and is never dropped here.
    pub drop_prob: f64,
    pub partitions: Vec<Partition>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { seed: 0, latency: LatencyBounds::default(), drop_prob: 0.0, partitions: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub tick: u64,
    pub from: PeerId,
    pub to: PeerId,
    pub kind: &'static str,
    pub crdt_id: CrdtId,
    pub delta_digest: Option<Digest32>,
    pub status: &'static str,
}

impl TraceRecord {
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.tick,
            self.from,
            self.to,
            self.kind,
            self.crdt_id,
            self.delta_digest.map_or_else(|| "-".to_string(), |d| d.to_hex()),
            self.status
        )
    }
}

/// A scripted local action against the peer map, returning messages to send
/// out (from, to, message).
pub type ScriptAction = Box<
    dyn FnOnce(&mut BTreeMap<PeerId, Peer>) -> Result<Vec<(PeerId, PeerId, PeerMessage)>, PeerError>
        + Send,
>;

enum Event {
    Deliver { from: PeerId, to: PeerId, msg: PeerMessage },
    Heal { partition: usize },
    Action { run: ScriptAction },
}

pub struct SimNet {
    config: SimConfig,
    rng: ChaCha8Rng,
    peers: BTreeMap<PeerId, Peer>,
    queue: BTreeMap<(u64, u64), Event>,
    links: BTreeSet<(PeerId, PeerId)>,
    seq: u64,
    now: u64,
    trace: Vec<TraceRecord>,
}

impl SimNet {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        if config.latency.min == 0 || config.latency.min > config.latency.max {
            return Err(SimError::Config("latency bounds must satisfy 1 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&config.drop_prob) {
            return Err(SimError::Config("drop_prob must be within [0, 1]".into()));
        }
        for p in &config.partitions {
            if p.start >= p.end {
                return Err(SimError::Config("partition must have start < end".into()));
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut net = SimNet {
            rng,
            peers: BTreeMap::new(),
            queue: BTreeMap::new(),
            links: BTreeSet::new(),
            seq: 0,
            now: 0,
            trace: Vec::new(),
            config,
        };
        for i in 0..net.config.partitions.len() {
            let end = net.config.partitions[i].end;
            net.enqueue(end, Event::Heal { partition: i });
        }
        Ok(net)
    }

    pub fn add_peer(&mut self, peer: Peer) {
        self.peers.insert(peer.id().to_string(), peer);
    }

    pub fn peer(&self, id: &str) -> Option<&Peer> {
        self.peers.get(id)
    }

    pub fn peer_mut(&mut self, id: &str) -> Option<&mut Peer> {
        self.peers.get_mut(id)
    }

    pub fn peers(&self) -> impl Iterator<Item = (&PeerId, &Peer)> {
        self.peers.iter()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn trace_lines(&self) -> Vec<String> {
        self.trace.iter().map(TraceRecord::line).collect()
    }

    fn enqueue(&mut self, tick: u64, event: Event) {
        let key = (tick, self.seq);
        self.seq += 1;
        self.queue.insert(key, event);
    }

    /// Establishes a connection: schedules the mutual subscribe plan and
    /// remembers the link for heal-time state syncs.
    pub fn connect(&mut self, a: &str, b: &str) -> Result<(), SimError> {
        let pa = self.peers.get(a).ok_or_else(|| SimError::Config(format!("unknown peer {a}")))?;
        let pb = self.peers.get(b).ok_or_else(|| SimError::Config(format!("unknown peer {b}")))?;
        let plan = connect_plan(pa, pb)?;
        let link = if a < b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        self.links.insert(link);
        for (from, to, msg) in plan {
            self.schedule(&from, &to, msg)?;
        }
        Ok(())
    }

    /// Schedules a message for delivery after a sampled latency, unless the
    /// link is partitioned or the (droppable) message is lost.
    pub fn schedule(&mut self, from: &str, to: &str, msg: PeerMessage) -> Result<(), SimError> {
        if !self.peers.contains_key(from) {
            return Err(SimError::Config(format!("unknown peer {from}")));
        }
        if !self.peers.contains_key(to) {
            return Err(SimError::Config(format!("unknown peer {to}")));
        }
        let kind = msg.body.kind();
        let crdt_id = msg.crdt_id.clone();
        let digest = match &msg.body {
            MessageBody::PublishOp(op) => Some(op.digest()),
            _ => None,
        };
        if self.partitioned(self.now, from, to) {
            self.trace.push(TraceRecord {
                tick: self.now,
                from: from.into(),
                to: to.into(),
                kind,
                crdt_id,
                delta_digest: digest,
                status: "withheld",
            });
            return Ok(());
        }
        let droppable = matches!(msg.body, MessageBody::PublishOp(_) | MessageBody::Subscribe);
        if droppable && self.config.drop_prob > 0.0 && self.rng.gen::<f64>() < self.config.drop_prob
        {
            self.trace.push(TraceRecord {
                tick: self.now,
                from: from.into(),
                to: to.into(),
                kind,
                crdt_id,
                delta_digest: digest,
                status: "dropped",
            });
            return Ok(());
        }
        let latency = self.rng.gen_range(self.config.latency.min..=self.config.latency.max);
        self.trace.push(TraceRecord {
            tick: self.now,
            from: from.into(),
            to: to.into(),
            kind,
            crdt_id,
            delta_digest: digest,
            status: "sent",
        });
        self.enqueue(self.now + latency, Event::Deliver { from: from.into(), to: to.into(), msg });
        Ok(())
    }

    /// Schedules a scripted local action at a tick.
    pub fn schedule_action(&mut self, tick: u64, run: ScriptAction) {
        self.enqueue(tick, Event::Action { run });
    }

    fn partitioned(&self, tick: u64, a: &str, b: &str) -> bool {
        self.config.partitions.iter().any(|p| {
            tick >= p.start && tick < p.end && (p.side_a.contains(a) != p.side_a.contains(b))
        })
    }

    /// Runs events in total (tick, sequence) order until the queue is empty
    /// or an event would exceed the tick budget.
    pub fn run_until_quiescent(&mut self, max_ticks: u64) -> Result<u64, SimError> {
        while let Some((&(tick, _), _)) = self.queue.iter().next() {
            if tick > max_ticks {
                return Err(SimError::NonQuiescent { remaining: self.queue.len() });
            }
            let key = (tick, *self.queue.keys().next().map(|(_, s)| s).unwrap());
            let event = self.queue.remove(&key).unwrap();
            self.now = tick;
            match event {
                Event::Deliver { from, to, msg } => {
                    let kind = msg.body.kind();
                    let crdt_id = msg.crdt_id.clone();
                    let digest = match &msg.body {
                        MessageBody::PublishOp(op) => Some(op.digest()),
                        _ => None,
                    };
                    let peer = self.peers.get_mut(&to).expect("scheduled peers exist");
                    let out = peer.handle_message(msg)?;
                    self.trace.push(TraceRecord {
                        tick,
                        from: from.clone(),
                        to: to.clone(),
                        kind,
                        crdt_id,
                        delta_digest: digest,
                        status: "delivered",
                    });
                    for (dest, m) in out {
                        self.schedule(&to, &dest, m)?;
                    }
                }
                Event::Heal { partition } => {
                    self.heal(partition)?;
                }
                Event::Action { run } => {
                    let out = run(&mut self.peers)?;
                    for (from, to, m) in out {
                        self.schedule(&from, &to, m)?;
                    }
                }
            }
        }
        Ok(self.now)
    }

    /// Mandatory reconciliation when a partition ends: every established
    /// link crossing the cut exchanges state-sync requests for all crdts
    /// either endpoint hosts.
    fn heal(&mut self, partition: usize) -> Result<(), SimError> {
        let cut = self.config.partitions[partition].side_a.clone();
        let links: Vec<(PeerId, PeerId)> = self
            .links
            .iter()
            .filter(|(a, b)| cut.contains(a) != cut.contains(b))
            .cloned()
            .collect();
        for (a, b) in links {
            let ids_a: Vec<CrdtId> = self.peers[&a].crdt_ids().cloned().collect();
            let ids_b: Vec<CrdtId> = self.peers[&b].crdt_ids().cloned().collect();
            for id in ids_b {
                let msg = PeerMessage {
                    crdt_id: id,
                    origin: a.clone(),
                    body: MessageBody::StateSyncRequest,
                };
                self.schedule(&a, &b, msg)?;
            }
            for id in ids_a {
                let msg = PeerMessage {
                    crdt_id: id,
                    origin: b.clone(),
                    body: MessageBody::StateSyncRequest,
                };
                self.schedule(&b, &a, msg)?;
            }
        }
        Ok(())
    }

    /// Canonical encodings of one crdt across all peers hosting it.
    pub fn crdt_encodings(&self, crdt_id: &str) -> Vec<(PeerId, Vec<u8>)> {
        self.peers
            .iter()
            .filter_map(|(id, p)| p.crdt(crdt_id).map(|c| (id.clone(), c.encode())))
            .collect()
    }

    /// True when every peer hosting the crdt holds a byte-identical state.
    pub fn converged(&self, crdt_id: &str) -> bool {
        let enc = self.crdt_encodings(crdt_id);
        enc.windows(2).all(|w| w[0].1 == w[1].1)
    }

    /// Drains messages synchronously until quiescent, asserting quiescence
    /// within the budget. Convenience for scripts that interleave actions
    /// with full propagation.
    pub fn settle(&mut self, max_ticks: u64) -> Result<u64, SimError> {
        self.run_until_quiescent(max_ticks)
    }
}

/// Deterministic per-peer upstream helper used by scripts: runs the closure
/// against one peer and forwards its broadcast list.
pub fn peer_action<F>(peer_id: &str, f: F) -> ScriptAction
where
    F: FnOnce(&mut Peer) -> Result<Vec<(PeerId, PeerMessage)>, PeerError> + Send + 'static,
{
    let peer_id = peer_id.to_string();
    Box::new(move |peers: &mut BTreeMap<PeerId, Peer>| {
        let peer = peers
            .get_mut(&peer_id)
            .ok_or_else(|| PeerError::Protocol(format!("unknown peer {peer_id}")))?;
        let out = f(peer)?;
        Ok(out.into_iter().map(|(to, m)| (peer_id.clone(), to, m)).collect())
    })
}
