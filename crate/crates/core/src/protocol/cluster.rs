//! Drives a set of agents over the simulated network.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info, warn};

use super::agent::{Action, Agent, AgentParams, Role, Status};
use super::message::Message;
use super::ProtocolError;
use crate::model::{assemble, DatasetShard, FlatWeights, SubVector};
use crate::netsim::{Event, Limit, NetConfig, SimTime, Simulator, MICROS_PER_MS};
use crate::{AgentId, PartitionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncMode {
    /// Every phase waits until the network is quiet.
    Synchronous,
    /// Every phase lasts one timeout; late messages spill into later phases.
    Asynchronous,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mode: SyncMode,
    pub round_timeout_ms: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            mode: SyncMode::Synchronous,
            round_timeout_ms: 1000.0,
        }
    }
}

/// Agent leaving permanently after training in `round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Departure {
    pub agent: AgentId,
    pub round: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundReport {
    pub round: u32,
    pub trained: Vec<AgentId>,
    pub offline: Vec<AgentId>,
    /// Event tags per agent, e.g. `disconnect`, `leave`, `repair:...`.
    pub events: BTreeMap<AgentId, Vec<String>>,
}

pub struct Cluster {
    sim: Simulator,
    agents: BTreeMap<AgentId, Agent>,
    timing: Timing,
    departures: Vec<Departure>,
    round: u32,
    initialized: bool,
    events: BTreeMap<AgentId, Vec<String>>,
}

impl Cluster {
    /// Agent `i` (1-based) receives `shards[i - 1]` and offers `storage[i - 1]`
    /// bytes (unlimited when absent). Agent 1 initiates.
    pub fn new(
        params: AgentParams,
        shards: Vec<DatasetShard>,
        storage: &[u64],
        net: NetConfig,
        timing: Timing,
        departures: Vec<Departure>,
    ) -> Result<Self, ProtocolError> {
        params.train.validate()?;
        let sim = Simulator::new(net)?;
        let mut agents = BTreeMap::new();
        for (i, shard) in shards.into_iter().enumerate() {
            let id = AgentId(i as u32 + 1);
            let role = if i == 0 {
                Role::Initiator
            } else {
                Role::Joiner { bootstrap: AgentId(1) }
            };
            let offer = storage.get(i).copied().unwrap_or(u64::MAX);
            agents.insert(id, Agent::new(id, role, params.clone(), shard, offer)?);
        }
        Ok(Self {
            sim,
            agents,
            timing,
            departures,
            round: 0,
            initialized: false,
            events: BTreeMap::new(),
        })
    }

    pub fn sim(&self) -> &Simulator {
        &self.sim
    }

    pub fn agent(&self, id: AgentId) -> Option<&Agent> {
        self.agents.get(&id)
    }

    pub fn agents(&self) -> impl Iterator<Item = &Agent> {
        self.agents.values()
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn is_online(&self, id: AgentId) -> bool {
        self.sim.is_online(id)
    }

    fn timeout(&self) -> SimTime {
        (self.timing.round_timeout_ms * MICROS_PER_MS).round() as SimTime
    }

    fn apply(&mut self, src: AgentId, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send { to, msg } => {
                    self.sim.send(to, msg.encode(), src);
                }
                Action::Publish { topic, msg } => {
                    self.sim.publish(&topic, &msg.encode(), src);
                }
                Action::Subscribe(topic) => self.sim.subscribe(src, &topic),
                Action::Unsubscribe(topic) => self.sim.unsubscribe(src, &topic),
            }
        }
    }

    /// Lets the network run for one phase.
    fn settle(&mut self) -> Result<(), ProtocolError> {
        let limit = match self.timing.mode {
            SyncMode::Synchronous => Limit::Drained,
            SyncMode::Asynchronous => Limit::Time(self.sim.now() + self.timeout()),
        };
        while let Some(event) = self.sim.next_event(limit) {
            let Event::Deliver(env) = event else {
                continue;
            };
            let msg = match Message::decode(&env.payload) {
                Ok(m) => m,
                Err(e) => {
                    warn!("undecodable message from {}: {e}", env.src);
                    continue;
                }
            };
            let Some(agent) = self.agents.get_mut(&env.dst) else {
                continue;
            };
            let actions = agent.on_message(env.src, msg, &self.sim.blobs)?;
            self.apply(env.dst, actions);
        }
        Ok(())
    }

    /// Calls `f` on every online agent in ID order and applies its actions.
    fn each_online<F>(&mut self, mut f: F) -> Result<(), ProtocolError>
    where
        F: FnMut(&mut Agent) -> Result<Vec<Action>, ProtocolError>,
    {
        let ids: Vec<AgentId> = self.agents.keys().copied().collect();
        for id in ids {
            if !self.sim.is_online(id) {
                continue;
            }
            let agent = self.agents.get_mut(&id).expect("listed");
            let actions = f(agent)?;
            self.apply(id, actions);
        }
        Ok(())
    }

    fn note(&mut self, agent: AgentId, tag: String) {
        self.events.entry(agent).or_default().push(tag);
    }

    fn collect_notes(&mut self) {
        for (&id, agent) in self.agents.iter_mut() {
            for tag in agent.take_notes() {
                self.events.entry(id).or_default().push(tag);
            }
        }
    }

    /// Announce, offers, table broadcast, retries and initial fetches. All
    /// traffic is charged to round 0.
    pub fn initialize(&mut self) -> Result<RoundReport, ProtocolError> {
        if self.initialized {
            return Ok(RoundReport::default());
        }
        self.sim.begin_round(0);
        let mut starts = Vec::new();
        for (&id, agent) in self.agents.iter_mut() {
            starts.push((id, agent.start()));
        }
        // Everybody listens before anybody speaks.
        for (id, actions) in &starts {
            let subs = actions
                .iter()
                .filter(|a| matches!(a, Action::Subscribe(_)))
                .cloned()
                .collect();
            self.apply(*id, subs);
        }
        for (id, actions) in starts {
            let rest = actions
                .into_iter()
                .filter(|a| !matches!(a, Action::Subscribe(_)))
                .collect();
            self.apply(id, rest);
        }
        self.settle()?;
        self.each_online(|a| Ok(a.reannounce()))?;
        self.settle()?;
        self.each_online(|a| a.finalize_membership())?;
        self.settle()?;
        for _ in 0..2 {
            self.each_online(|a| Ok(a.retry_table()))?;
            self.settle()?;
        }
        for agent in self.agents.values_mut() {
            agent.abort_if_unjoined();
        }
        let ids: Vec<AgentId> = self.agents.keys().copied().collect();
        for id in ids {
            if !self.sim.is_online(id) {
                continue;
            }
            let agent = self.agents.get_mut(&id).expect("listed");
            let actions = agent.prune_unconfirmed(&mut self.sim.blobs)?;
            self.apply(id, actions);
        }
        self.settle()?;
        self.each_online(|a| Ok(a.begin_round(0)))?;
        self.settle()?;
        for agent in self.agents.values_mut() {
            agent.end_round();
        }
        self.sim.close_round();
        self.initialized = true;
        for id in self.agents.keys().copied().collect::<Vec<_>>() {
            self.note(id, "init".into());
        }
        self.collect_notes();
        let trained = Vec::new();
        Ok(RoundReport {
            round: 0,
            trained,
            offline: Vec::new(),
            events: std::mem::take(&mut self.events),
        })
    }

    /// Applies the connectivity schedule for `round`.
    fn apply_schedule(&mut self, round: u32) {
        let schedule = self.sim.config().disconnects.clone();
        for d in schedule {
            if d.from_round == round && self.agents.contains_key(&d.agent) {
                self.sim.disconnect(d.agent);
                self.note(d.agent, "disconnect".into());
                info!("agent {} disconnects in round {round}", d.agent);
            }
            if d.to_round + 1 == round && self.agents.contains_key(&d.agent) {
                self.sim.reconnect(d.agent);
                if let Some(agent) = self.agents.get_mut(&d.agent) {
                    agent.reconnect(d.memory);
                }
                self.note(d.agent, format!("reconnect:{}", d.memory));
            }
        }
    }

    fn depart(&mut self, id: AgentId) -> Result<(), ProtocolError> {
        let Some(agent) = self.agents.get_mut(&id) else {
            return Err(ProtocolError::UnknownAgent(id));
        };
        if !agent.is_active() {
            return Ok(());
        }
        match agent.terminate(&mut self.sim.blobs) {
            Ok((_, actions)) => {
                self.apply(id, actions);
                self.note(id, format!("leave:{id}"));
            }
            Err(ProtocolError::LastAgent) => self.note(id, "persisted".into()),
            Err(e) => return Err(e),
        }
        self.sim.remove_node(id);
        Ok(())
    }

    /// One full round: load, train and update, replica sync, aggregation.
    pub fn run_round(&mut self) -> Result<RoundReport, ProtocolError> {
        if !self.initialized {
            self.initialize()?;
        }
        self.round += 1;
        let round = self.round;
        self.sim.begin_round(round);
        self.apply_schedule(round);

        self.each_online(|a| Ok(a.begin_round(round)))?;
        self.settle()?;

        let before: BTreeMap<AgentId, u32> = self
            .agents
            .iter()
            .map(|(&id, a)| (id, a.stats().rounds_trained))
            .collect();
        self.each_online(|a| a.train_and_update())?;
        let leaving: Vec<AgentId> = self
            .departures
            .iter()
            .filter(|d| d.round == round)
            .map(|d| d.agent)
            .collect();
        for id in leaving {
            self.depart(id)?;
        }
        self.settle()?;

        self.each_online(|a| Ok(a.collect_deadline()))?;
        self.settle()?;
        self.each_online(|a| a.aggregate_deadline())?;
        self.settle()?;
        for (&id, agent) in self.agents.iter_mut() {
            if self.sim.is_online(id) {
                agent.end_round();
            }
        }
        self.sim.close_round();
        self.collect_notes();

        let trained = self
            .agents
            .iter()
            .filter(|(id, a)| a.stats().rounds_trained > before[id])
            .map(|(&id, _)| id)
            .collect();
        let offline = self
            .agents
            .iter()
            .filter(|(&id, a)| !self.sim.is_online(id) && a.status() != Status::Departed)
            .map(|(&id, _)| id)
            .collect();
        debug!("round {round} finished at t={}", self.sim.now());
        Ok(RoundReport {
            round,
            trained,
            offline,
            events: std::mem::take(&mut self.events),
        })
    }

    /// The model as held by the agents responsible for it: each partition
    /// comes from its lowest-ID online holder.
    pub fn global_model(&self) -> Result<FlatWeights, ProtocolError> {
        let any = self
            .agents
            .values()
            .find(|a| a.is_active())
            .ok_or(ProtocolError::LastAgent)?;
        let layout = any.layout();
        let mut parts = Vec::with_capacity(layout.count());
        for k in layout.ids() {
            let holder = self
                .agents
                .values()
                .filter(|a| a.is_active() && a.global_values(k).is_some())
                .min_by_key(|a| (!self.sim.is_online(a.id()), a.id()))
                .ok_or(ProtocolError::PartitionUnavailable(k))?;
            parts.push(SubVector {
                partition: k,
                offset: layout.range(k).start,
                values: holder.global_values(k).expect("filtered").to_vec(),
            });
        }
        Ok(assemble(&parts, layout.total())?)
    }

    /// Agents currently responsible for partition `k`.
    pub fn holders(&self, k: PartitionId) -> BTreeSet<AgentId> {
        self.agents
            .values()
            .filter(|a| a.is_active() && a.global_values(k).is_some())
            .map(|a| a.id())
            .collect()
    }
}
