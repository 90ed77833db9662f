//! The per-agent protocol: handshake, load, train, update, replica sync,
//! aggregation and handoff.

mod agent;
mod cluster;
pub mod message;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{FlatWeights, ModelError, PartitionLayout, SubVector};
use crate::netsim::NetError;
use crate::partition::PartitionError;
use crate::{AgentId, PartitionId};

pub use agent::{Action, Agent, AgentParams, AgentStats, Phase, Role, Status};
pub use cluster::{Cluster, Departure, RoundReport, SyncMode, Timing};
pub use message::{Message, ReplyMessage, ReplicaSyncMessage, UpdateMessage, WireError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("partition unavailable: {0}")]
    PartitionUnavailable(PartitionId),
    #[error("agent {0} has no partition table yet")]
    NotInitialized(AgentId),
    #[error("last agent departed; model persisted")]
    LastAgent,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
}

/// How the per-partition aggregation weight evolves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonMode {
    /// `eps <- alpha * eps + (1 - alpha) / r`, bootstrapped to `1 / r`.
    Ema { alpha: f64 },
    /// `eps = 1 / r` every round.
    InverseR,
}

/// Next aggregation weight for `r` contributions.
pub fn next_epsilon(previous: Option<f64>, r: usize, mode: EpsilonMode) -> f64 {
    let target = 1.0 / r as f64;
    match (mode, previous) {
        (EpsilonMode::InverseR, _) | (EpsilonMode::Ema { .. }, None) => target,
        (EpsilonMode::Ema { alpha }, Some(eps)) => alpha * eps + (1.0 - alpha) * target,
    }
}

/// `before - after`, sliced along `layout`.
pub fn compute_delta(
    before: &FlatWeights,
    after: &FlatWeights,
    layout: &PartitionLayout,
) -> Result<Vec<SubVector>, ProtocolError> {
    if before.len() != after.len() || before.len() != layout.total() {
        return Err(ProtocolError::LengthMismatch(before.len(), after.len()));
    }
    Ok(layout
        .ids()
        .map(|id| {
            let range = layout.range(id);
            SubVector {
                partition: id,
                offset: range.start,
                values: before.as_slice()[range.clone()]
                    .iter()
                    .zip(&after.as_slice()[range])
                    .map(|(b, a)| b - a)
                    .collect(),
            }
        })
        .collect())
}

/// Applies `values -= eps * sum(deltas)` after refreshing `eps` for
/// `r = received.len()`. Deltas are summed in ascending key order. Returns
/// `r`; with no contributions nothing changes.
pub fn aggregate<K: Ord + Copy>(
    values: &mut [f64],
    epsilon: &mut Option<f64>,
    received: &BTreeMap<K, Vec<f64>>,
    mode: EpsilonMode,
) -> Result<usize, ProtocolError> {
    let r = received.len();
    if r == 0 {
        return Ok(0);
    }
    let mut sum = vec![0.0; values.len()];
    for delta in received.values() {
        if delta.len() != values.len() {
            return Err(ProtocolError::LengthMismatch(delta.len(), values.len()));
        }
        for (s, d) in sum.iter_mut().zip(delta) {
            *s += d;
        }
    }
    apply_sum(values, epsilon, &sum, r, mode)
}

/// Applies `values -= eps * sum` where `sum` already adds up `r` deltas.
pub fn apply_sum(
    values: &mut [f64],
    epsilon: &mut Option<f64>,
    sum: &[f64],
    r: usize,
    mode: EpsilonMode,
) -> Result<usize, ProtocolError> {
    if r == 0 {
        return Ok(0);
    }
    if sum.len() != values.len() {
        return Err(ProtocolError::LengthMismatch(sum.len(), values.len()));
    }
    let eps = next_epsilon(*epsilon, r, mode);
    *epsilon = Some(eps);
    for (v, s) in values.iter_mut().zip(sum) {
        *v -= eps * s;
    }
    Ok(r)
}

/// Convenience wrapper keyed by sender only.
pub fn aggregate_from_senders(
    values: &mut [f64],
    epsilon: &mut Option<f64>,
    received: &[(AgentId, Vec<f64>)],
    mode: EpsilonMode,
) -> Result<usize, ProtocolError> {
    let map: BTreeMap<AgentId, Vec<f64>> = received.iter().cloned().collect();
    aggregate(values, epsilon, &map, mode)
}
