//! Scenario execution and CSV metrics.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::ScenarioConfig;
use super::dataset::load_dataset;
use super::HarnessError;
use crate::baseline::central_train;
use crate::model::{evaluate, DatasetShard, ModelSpec};
use crate::protocol::{AgentParams, Cluster, RoundReport, Timing};
use crate::AgentId;

pub const CSV_HEADER: &str = "round,agent_id,accuracy,loss,bytes_sent,bytes_received,epsilon_mean,event";

/// One CSV line. `agent == None` is the global row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: u32,
    pub agent: Option<AgentId>,
    pub accuracy: f64,
    pub loss: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub epsilon_mean: Option<f64>,
    pub event: String,
}

impl MetricRow {
    fn fields(&self) -> [String; 8] {
        [
            self.round.to_string(),
            self.agent.map_or_else(|| "global".to_string(), |a| a.to_string()),
            self.accuracy.to_string(),
            self.loss.to_string(),
            self.bytes_sent.to_string(),
            self.bytes_received.to_string(),
            self.epsilon_mean.map(|e| e.to_string()).unwrap_or_default(),
            self.event.clone(),
        ]
    }
}

pub fn write_csv(rows: &[MetricRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(',')).expect("in-memory write");
    for row in rows {
        w.write_record(row.fields()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Everything needed to build a cluster or run the reference.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ScenarioConfig,
    pub spec: ModelSpec,
    pub params: AgentParams,
    pub shards: Vec<DatasetShard>,
    pub eval: DatasetShard,
}

impl Prepared {
    pub fn new(cfg: &ScenarioConfig, data_dir: Option<&Path>) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let (shards, eval) = load_dataset(cfg, data_dir)?;
        let classes = eval
            .labels()
            .iter()
            .chain(shards.iter().flat_map(|s| s.labels()))
            .max()
            .map_or(2, |&m| m as usize + 1);
        let classes = match &cfg.dataset {
            super::config::DatasetConfig::Synthetic { classes: c, .. }
            | super::config::DatasetConfig::Idx { classes: c, .. } => (*c).max(classes),
        };
        let mut layers = vec![eval.dim()];
        layers.extend(&cfg.hidden);
        layers.push(classes);
        let spec = ModelSpec::new(layers, cfg.model_seed())?;
        if (cfg.partitions as usize) > spec.param_count() {
            return Err(HarnessError::Config(super::ConfigError::Invalid(format!(
                "{} partitions for a model of {} weights",
                cfg.partitions,
                spec.param_count()
            ))));
        }
        let params = AgentParams {
            spec: spec.clone(),
            partitions: cfg.partitions,
            pi: cfg.pi,
            rho: cfg.rho,
            epsilon: cfg.epsilon_mode(),
            train: cfg.train_config(shards[0].len()),
        };
        Ok(Self {
            config: cfg.clone(),
            spec,
            params,
            shards,
            eval,
        })
    }

    pub fn cluster(&self) -> Result<Cluster, HarnessError> {
        let partition_bytes = self.params.partition_bytes();
        let storage: Vec<u64> = (1..=self.config.agents)
            .map(|a| {
                if self.config.storage_zero.contains(&AgentId(a)) {
                    0
                } else {
                    partition_bytes * u64::from(self.config.partitions)
                }
            })
            .collect();
        Ok(Cluster::new(
            self.params.clone(),
            self.shards.clone(),
            &storage,
            self.config.net_config(),
            Timing {
                mode: self.config.sync_mode,
                round_timeout_ms: self.config.round_timeout_ms,
            },
            self.config.leaves.clone(),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub name: String,
    pub rows: Vec<MetricRow>,
}

impl RunOutput {
    pub fn global(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.agent.is_none())
    }

    pub fn final_accuracy(&self) -> f64 {
        self.global().last().map_or(f64::NAN, |r| r.accuracy)
    }

    pub fn accuracy_at(&self, round: u32) -> Option<f64> {
        self.global().find(|r| r.round == round).map(|r| r.accuracy)
    }

    pub fn csv(&self) -> String {
        write_csv(&self.rows)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Folds per-agent tags into `tag` (everyone) or `tag:a+b`.
fn global_event(events: &BTreeMap<AgentId, Vec<String>>, population: usize) -> String {
    let mut by_tag: BTreeMap<String, Vec<AgentId>> = BTreeMap::new();
    for (&agent, tags) in events {
        for tag in tags {
            let base = tag.split(':').next().unwrap_or(tag).to_string();
            let who = by_tag.entry(base).or_default();
            if !who.contains(&agent) {
                who.push(agent);
            }
        }
    }
    by_tag
        .into_iter()
        .map(|(tag, who)| {
            if who.len() == population && population > 1 {
                tag
            } else {
                let ids: Vec<String> = who.iter().map(|a| a.to_string()).collect();
                format!("{tag}:{}", ids.join("+"))
            }
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn agent_event(tags: Option<&Vec<String>>) -> String {
    let mut base: Vec<&str> = Vec::new();
    for tag in tags.into_iter().flatten() {
        let b = tag.split(':').next().unwrap_or(tag);
        if !base.contains(&b) {
            base.push(b);
        }
    }
    base.join(";")
}

/// Runs a decentralized scenario. `observer` sees the cluster after the
/// handshake (round 0) and after every round.
pub fn run_observed<F>(prepared: &Prepared, mut observer: F) -> Result<RunOutput, HarnessError>
where
    F: FnMut(&RoundReport, &Cluster),
{
    let cfg = &prepared.config;
    let mut cluster = prepared.cluster()?;
    let mut rows = Vec::new();
    let mut last = (f64::NAN, f64::NAN);
    for round in 0..=cfg.rounds {
        let report = if round == 0 {
            cluster.initialize()?
        } else {
            cluster.run_round()?
        };
        observer(&report, &cluster);
        let view = cluster
            .agent(AgentId(1))
            .filter(|a| a.is_active())
            .and_then(|a| a.load_model().ok())
            .map_or_else(|| cluster.global_model().ok(), Some);
        if let Some(w) = view {
            let (loss, acc) = evaluate(&prepared.spec, &w, &prepared.eval)?;
            last = (acc, loss);
        }
        rows.push(MetricRow {
            round,
            agent: None,
            accuracy: last.0,
            loss: last.1,
            bytes_sent: 0,
            bytes_received: 0,
            epsilon_mean: mean(cluster.agents().filter(|a| a.is_active()).flat_map(|a| a.epsilons())),
            event: global_event(&report.events, cfg.agents as usize),
        });
        if cfg.per_agent {
            for agent in cluster.agents() {
                let (acc, loss) = match agent.load_model() {
                    Ok(w) => {
                        let (l, a) = evaluate(&prepared.spec, &w, &prepared.eval)?;
                        (a, l)
                    }
                    Err(_) => (f64::NAN, f64::NAN),
                };
                rows.push(MetricRow {
                    round,
                    agent: Some(agent.id()),
                    accuracy: acc,
                    loss,
                    bytes_sent: 0,
                    bytes_received: 0,
                    epsilon_mean: mean(agent.epsilons()),
                    event: agent_event(report.events.get(&agent.id())),
                });
            }
        }
    }
    // Late deliveries are charged to the round they were sent in, so the
    // byte columns are filled from the final ledger.
    let ledger = cluster.sim().ledger();
    for row in rows.iter_mut() {
        let entry = match row.agent {
            None => ledger.round_totals(row.round),
            Some(a) => ledger.entry(row.round, a),
        };
        row.bytes_sent = entry.bytes_sent;
        row.bytes_received = entry.bytes_received;
    }
    Ok(RunOutput {
        name: cfg.name.clone(),
        rows,
    })
}

pub fn run_scenario(cfg: &ScenarioConfig, data_dir: Option<&Path>) -> Result<RunOutput, HarnessError> {
    run_observed(&Prepared::new(cfg, data_dir)?, |_, _| {})
}

/// The server-side reference over the same shards, seeds and rounds.
pub fn run_central(prepared: &Prepared) -> Result<RunOutput, HarnessError> {
    let cfg = &prepared.config;
    let records = central_train(
        &prepared.spec,
        &prepared.shards,
        &prepared.eval,
        &prepared.params.train,
        cfg.rounds,
    )?;
    let rows = records
        .into_iter()
        .map(|r| MetricRow {
            round: r.round,
            agent: None,
            accuracy: r.accuracy,
            loss: r.loss,
            bytes_sent: 0,
            bytes_received: 0,
            epsilon_mean: (r.round > 0).then(|| 1.0 / prepared.shards.len() as f64),
            event: if r.round == 0 { "init".into() } else { String::new() },
        })
        .collect();
    Ok(RunOutput {
        name: format!("{}-central", cfg.name),
        rows,
    })
}
