//! Server-orchestrated federated averaging over the same shards and seeds.

use crate::model::{evaluate, init_weights, sgd_fit, DatasetShard, FlatWeights, ModelError, ModelSpec, TrainConfig};
use crate::{derive_seed, AgentId};

#[derive(Debug, Clone, PartialEq)]
pub struct CentralRoundRecord {
    pub round: u32,
    pub global_weights: FlatWeights,
    pub accuracy: f64,
    pub loss: f64,
}

/// Seed of agent `agent`'s local fit in `round`, shared with the
/// decentralized run.
pub fn local_config(cfg: &TrainConfig, agent: AgentId, round: u32) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cfg.seed, &[u64::from(agent.0), u64::from(round)]),
        ..*cfg
    }
}

/// One round: every shard trains from `w`, the server takes the mean.
/// Shard `i` belongs to agent `i + 1`; models are summed in that order.
pub fn central_round(
    spec: &ModelSpec,
    w: &FlatWeights,
    shards: &[DatasetShard],
    cfg: &TrainConfig,
    round: u32,
) -> Result<FlatWeights, ModelError> {
    if shards.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    let mut sum = vec![0.0; w.len()];
    for (i, shard) in shards.iter().enumerate() {
        let local = sgd_fit(spec, w, shard, &local_config(cfg, AgentId(i as u32 + 1), round))?;
        // Accumulated as deltas so the arithmetic mirrors the holders'.
        for ((s, b), a) in sum.iter_mut().zip(w.as_slice()).zip(local.as_slice()) {
            *s += b - a;
        }
    }
    let eps = 1.0 / shards.len() as f64;
    Ok(w
        .as_slice()
        .iter()
        .zip(&sum)
        .map(|(v, s)| v - eps * s)
        .collect::<Vec<_>>()
        .into())
}

/// Runs `rounds` rounds from the initial model. Record 0 is the initial
/// model itself.
pub fn central_train(
    spec: &ModelSpec,
    shards: &[DatasetShard],
    eval: &DatasetShard,
    cfg: &TrainConfig,
    rounds: u32,
) -> Result<Vec<CentralRoundRecord>, ModelError> {
    cfg.validate()?;
    let mut w = init_weights(spec);
    let mut records = Vec::with_capacity(rounds as usize + 1);
    let (loss, accuracy) = evaluate(spec, &w, eval)?;
    records.push(CentralRoundRecord {
        round: 0,
        global_weights: w.clone(),
        accuracy,
        loss,
    });
    for round in 1..=rounds {
        w = central_round(spec, &w, shards, cfg, round)?;
        let (loss, accuracy) = evaluate(spec, &w, eval)?;
        records.push(CentralRoundRecord {
            round,
            global_weights: w.clone(),
            accuracy,
            loss,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shard(owner: u32, flip: bool) -> DatasetShard {
        let mut s = DatasetShard::new(AgentId(owner), 3);
        for i in 0..6 {
            let x = i as f64 / 6.0;
            let label = u32::from((i % 2 == 0) ^ flip);
            s.push(&[x, 1.0 - x, 1.0], label);
        }
        s
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.3,
            batch_size: 2,
            local_iterations: 3,
            seed: 9,
        }
    }

    #[test]
    fn one_agent_is_its_own_fit() {
        let spec = ModelSpec::new(vec![3, 4, 2], 1).unwrap();
        let w = init_weights(&spec);
        let shards = [shard(1, false)];
        let got = central_round(&spec, &w, &shards, &cfg(), 1).unwrap();
        let fit = sgd_fit(&spec, &w, &shards[0], &local_config(&cfg(), AgentId(1), 1)).unwrap();
        for (a, b) in got.as_slice().iter().zip(fit.as_slice()) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn two_agents_average_by_hand() {
        let spec = ModelSpec::new(vec![3, 2], 1).unwrap();
        let w = init_weights(&spec);
        let shards = [shard(1, false), shard(2, true)];
        let got = central_round(&spec, &w, &shards, &cfg(), 2).unwrap();
        let a = sgd_fit(&spec, &w, &shards[0], &local_config(&cfg(), AgentId(1), 2)).unwrap();
        let b = sgd_fit(&spec, &w, &shards[1], &local_config(&cfg(), AgentId(2), 2)).unwrap();
        for i in 0..w.len() {
            let mean = 0.5 * (a.as_slice()[i] + b.as_slice()[i]);
            assert!((got.as_slice()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rounds_and_determinism() {
        let spec = ModelSpec::new(vec![3, 2], 4).unwrap();
        let shards = [shard(1, false), shard(2, false)];
        let eval = shard(3, false);
        let r0 = central_train(&spec, &shards, &eval, &cfg(), 0).unwrap();
        assert_eq!(r0.len(), 1);
        assert_eq!(r0[0].global_weights, init_weights(&spec));
        let a = central_train(&spec, &shards, &eval, &cfg(), 3).unwrap();
        let b = central_train(&spec, &shards, &eval, &cfg(), 3).unwrap();
        assert_eq!(a, b);
        assert!(central_round(&spec, &init_weights(&spec), &[], &cfg(), 1).is_err());
    }
}
