//! Confluent replication library: a DVCS-style replicated datatype with
//! decoupled conflict resolution, an OR-set sharing the same CRDT interface,
//! a content-addressed value store, an op-based gossip peer, and a
//! deterministic network simulator for convergence testing.

pub mod codec;
pub mod commitbench;
pub mod dvcs;
pub mod fuzz;
pub mod hash;
pub mod orset;
pub mod peer;
pub mod scenarios;
pub mod simnet;
pub mod store;
