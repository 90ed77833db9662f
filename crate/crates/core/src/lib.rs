//! Decentralized federated learning over a partitioned, replicated model.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: a small MLP kernel operating on one flat weight vector, plus
//!   contiguous partition slicing.
//! - [`partition`]: the partition-to-holder registry with the minimum-load
//!   (`pi`) and maximum-replication (`rho`) constraints.
//! - [`netsim`]: a deterministic discrete-event network with pub/sub topics,
//!   direct messages, loss, latency and disconnection schedules.
//! - [`protocol`]: the per-agent state machine (handshake, load, train,
//!   update, replica sync, aggregation, handoff) and the cluster driver.
//! - [`baseline`]: the server-orchestrated averaging reference.
//! - [`harness`]: scenario configs, datasets, presets and CSV metrics.

pub mod baseline;
pub mod harness;
pub mod idx;
pub mod model;
pub mod netsim;
pub mod partition;
pub mod protocol;
mod seed;

use std::fmt;

pub use seed::derive_seed;

/// Identifier of a participating agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One-based identifier of a model partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartitionId(pub u32);

impl fmt::Display for PartitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
