//! Single-agent state machine.
//!
//! The agent never touches the network directly: every handler returns the
//! [`Action`]s it wants performed, and the driver (see [`super::Cluster`])
//! hands it the messages that arrive. Handlers for the round phases are
//! called by the driver at the phase boundaries.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use sha2::{Digest, Sha256};

use super::message::{
    encode_values, decode_values, Announce, FetchPurpose, HandoffEntry, Message,
    ReplicaSyncMessage, ReplyMessage, UpdateMessage,
};
use super::{apply_sum, compute_delta, EpsilonMode, ProtocolError};
use crate::model::{
    assemble, init_weights, sgd_fit, DatasetShard, FlatWeights, ModelSpec, PartitionLayout,
    SubVector, TrainConfig,
};
use crate::netsim::{BlobStore, MemoryMode};
use crate::partition::{HandoffPlan, PartitionTable, Reassignment};
use crate::{AgentId, PartitionId};

/// Topic carrying announcements, tables and handoffs.
pub const MEMBERSHIP_TOPIC: &str = "membership";

/// Rounds a silent holder is skipped when choosing where to send.
const SUSPECT_ROUNDS: u32 = 3;

/// Contributions older than this many rounds are discarded.
const STALE_ROUNDS: u32 = 3;

const TABLE_REQUEST_BUDGET: u32 = 2;

pub fn partition_topic(k: PartitionId) -> String {
    format!("partition-{}", k.0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send { to: AgentId, msg: Message },
    Publish { topic: String, msg: Message },
    Subscribe(String),
    Unsubscribe(String),
}

/// Shared training-process description.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub spec: ModelSpec,
    pub partitions: u32,
    pub pi: u32,
    pub rho: u32,
    pub epsilon: EpsilonMode,
    pub train: TrainConfig,
}

impl AgentParams {
    pub fn layout(&self) -> Result<PartitionLayout, ProtocolError> {
        Ok(PartitionLayout::new(
            self.spec.param_count(),
            self.partitions as usize,
        )?)
    }

    /// Bytes needed to store the largest partition.
    pub fn partition_bytes(&self) -> u64 {
        let total = self.spec.param_count() as u64;
        let k = u64::from(self.partitions.max(1));
        total.div_ceil(k) * 8
    }

    /// Seed of one agent's local fit in one round.
    pub fn fit_config(&self, agent: AgentId, round: u32) -> TrainConfig {
        crate::baseline::local_config(&self.train, agent, round)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Joiner { bootstrap: AgentId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Joining,
    Active,
    Aborted,
    Departed,
}

/// Where the agent is inside the current round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Loading,
    Training,
    Collected,
    Aggregated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AgentStats {
    pub rounds_trained: u32,
    pub rounds_skipped: u32,
    pub updates_sent: u64,
    pub fetches_sent: u64,
    pub repairs: u64,
    pub redelivered: u64,
}

type Key = (AgentId, u32);

/// Deltas a co-holder received directly, already summed.
#[derive(Debug, Clone, PartialEq)]
struct Group {
    keys: Vec<Key>,
    sum: Vec<f64>,
}

fn sum_deltas<'a>(len: usize, deltas: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut sum = vec![0.0; len];
    for d in deltas {
        for (s, v) in sum.iter_mut().zip(d) {
            *s += v;
        }
    }
    sum
}

/// A partition this agent is responsible for.
#[derive(Debug, Clone, PartialEq)]
struct HeldSlot {
    values: Vec<f64>,
    /// Last round this holder aggregated.
    version: u32,
    epsilon: Option<f64>,
    pending: BTreeMap<Key, Vec<f64>>,
    overflow: BTreeMap<Key, Vec<f64>>,
    /// Co-holder sums keyed by `(origin, round)`.
    groups: BTreeMap<Key, Group>,
    group_overflow: BTreeMap<Key, Group>,
    applied: BTreeSet<Key>,
    reply_to: BTreeSet<AgentId>,
    reply_overflow: BTreeSet<AgentId>,
    repair_round: Option<u32>,
}

impl HeldSlot {
    fn new(values: Vec<f64>, version: u32) -> Self {
        Self {
            values,
            version,
            epsilon: None,
            pending: BTreeMap::new(),
            overflow: BTreeMap::new(),
            groups: BTreeMap::new(),
            group_overflow: BTreeMap::new(),
            applied: BTreeSet::new(),
            reply_to: BTreeSet::new(),
            reply_overflow: BTreeSet::new(),
            repair_round: None,
        }
    }

    fn knows(&self, key: &Key) -> bool {
        self.applied.contains(key)
            || self.pending.contains_key(key)
            || self.overflow.contains_key(key)
            || self
                .groups
                .values()
                .chain(self.group_overflow.values())
                .any(|g| g.keys.contains(key))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Cached {
    values: Vec<f64>,
    version: u32,
}

#[derive(Debug, Clone, PartialEq)]
struct Outstanding {
    holder: AgentId,
    round: u32,
    delta: Vec<f64>,
}

fn digest(values: &[f64]) -> u64 {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_be_bytes());
    }
    let out = h.finalize();
    u64::from_be_bytes(out[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone)]
pub struct Agent {
    id: AgentId,
    role: Role,
    params: AgentParams,
    layout: PartitionLayout,
    storage_offer: u64,
    shard: DatasetShard,
    status: Status,
    table: Option<PartitionTable>,
    table_version: u32,
    init_model: Option<FlatWeights>,
    slots: BTreeMap<PartitionId, HeldSlot>,
    cache: BTreeMap<PartitionId, Cached>,
    outstanding: BTreeMap<PartitionId, Outstanding>,
    pending_fetches: BTreeMap<PartitionId, AgentId>,
    suspects: BTreeMap<AgentId, u32>,
    round: u32,
    phase: Phase,
    needs_refresh: bool,
    announce_seen: bool,
    offers: Vec<(AgentId, u64)>,
    finalized: bool,
    table_requests: u32,
    acked: BTreeSet<AgentId>,
    stats: AgentStats,
    notes: Vec<String>,
}

impl Agent {
    pub fn new(
        id: AgentId,
        role: Role,
        params: AgentParams,
        shard: DatasetShard,
        storage_offer: u64,
    ) -> Result<Self, ProtocolError> {
        let layout = params.layout()?;
        Ok(Self {
            id,
            role,
            params,
            layout,
            storage_offer,
            shard,
            status: Status::Joining,
            table: None,
            table_version: 0,
            init_model: None,
            slots: BTreeMap::new(),
            cache: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            pending_fetches: BTreeMap::new(),
            suspects: BTreeMap::new(),
            round: 0,
            phase: Phase::Init,
            needs_refresh: false,
            announce_seen: false,
            offers: Vec::new(),
            finalized: false,
            table_requests: 0,
            acked: BTreeSet::new(),
            stats: AgentStats::default(),
            notes: Vec::new(),
        })
    }

    pub fn id(&self) -> AgentId {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn stats(&self) -> AgentStats {
        self.stats
    }

    pub fn params(&self) -> &AgentParams {
        &self.params
    }

    pub fn layout(&self) -> PartitionLayout {
        self.layout
    }

    pub fn table(&self) -> Option<&PartitionTable> {
        self.table.as_ref()
    }

    pub fn is_active(&self) -> bool {
        self.status == Status::Active
    }

    pub fn is_trainer_only(&self) -> bool {
        self.slots.is_empty()
    }

    /// Partitions this agent currently holds.
    pub fn held(&self) -> BTreeSet<PartitionId> {
        self.slots.keys().copied().collect()
    }

    pub fn epsilon(&self, k: PartitionId) -> Option<f64> {
        self.slots.get(&k).and_then(|s| s.epsilon)
    }

    pub fn epsilons(&self) -> impl Iterator<Item = f64> + '_ {
        self.slots.values().filter_map(|s| s.epsilon)
    }

    /// Current global values of a held partition.
    pub fn global_values(&self, k: PartitionId) -> Option<&[f64]> {
        self.slots.get(&k).map(|s| s.values.as_slice())
    }

    pub fn cached_values(&self, k: PartitionId) -> Option<&[f64]> {
        self.cache.get(&k).map(|c| c.values.as_slice())
    }

    pub fn shard(&self) -> &DatasetShard {
        &self.shard
    }

    /// Drains the agent's event notes (for metrics tags).
    pub fn take_notes(&mut self) -> Vec<String> {
        std::mem::take(&mut self.notes)
    }

    fn initial_model(&mut self) -> &FlatWeights {
        let spec = &self.params.spec;
        self.init_model.get_or_insert_with(|| init_weights(spec))
    }

    fn initial_slice(&mut self, k: PartitionId) -> Vec<f64> {
        let range = self.layout.range(k);
        self.initial_model().as_slice()[range].to_vec()
    }

    fn announce(&self) -> Message {
        Message::Announce(Announce {
            initiator: self.id,
            layer_sizes: self.params.spec.layer_sizes().iter().map(|&n| n as u32).collect(),
            model_seed: self.params.spec.seed(),
            partitions: self.params.partitions,
            pi: self.params.pi,
            rho: self.params.rho,
            optimizer: "SGD".into(),
        })
    }

    // ----- initialisation --------------------------------------------------

    /// Subscribes to the membership topic; the initiator announces itself.
    pub fn start(&mut self) -> Vec<Action> {
        let mut out = vec![Action::Subscribe(MEMBERSHIP_TOPIC.into())];
        if self.role == Role::Initiator {
            out.push(Action::Publish {
                topic: MEMBERSHIP_TOPIC.into(),
                msg: self.announce(),
            });
        }
        out
    }

    /// Repeats the announcement while the table is still open.
    pub fn reannounce(&mut self) -> Vec<Action> {
        if self.role != Role::Initiator || self.finalized {
            return Vec::new();
        }
        vec![Action::Publish {
            topic: MEMBERSHIP_TOPIC.into(),
            msg: self.announce(),
        }]
    }

    /// Initiator: admits collected offers in arrival order and broadcasts the
    /// resulting table. With no responders the initiator proceeds alone.
    pub fn finalize_membership(&mut self) -> Result<Vec<Action>, ProtocolError> {
        if self.role != Role::Initiator || self.finalized {
            return Ok(Vec::new());
        }
        let mut table =
            PartitionTable::bootstrap(self.params.partitions, self.params.pi, self.params.rho, self.id)?;
        let unit = self.params.partition_bytes();
        for &(agent, offer) in &self.offers {
            table.join_with_storage(agent, offer, unit)?;
        }
        if self.offers.is_empty() {
            self.notes.push("solo".into());
        }
        self.finalized = true;
        Ok(self.install_and_broadcast(table))
    }

    fn install_and_broadcast(&mut self, table: PartitionTable) -> Vec<Action> {
        let text = table.to_canonical_text();
        let version = self.table_version + 1;
        let mut out = self.adopt_table(table, version);
        out.push(Action::Publish {
            topic: MEMBERSHIP_TOPIC.into(),
            msg: Message::Table { version, text },
        });
        out
    }

    /// Joiner still without a table asks the initiator again; once the budget
    /// is spent the agent gives up.
    pub fn retry_table(&mut self) -> Vec<Action> {
        if self.role == Role::Initiator {
            return Vec::new();
        }
        if self.status == Status::Active {
            return self.ack();
        }
        if self.status != Status::Joining {
            return Vec::new();
        }
        if self.table_requests >= TABLE_REQUEST_BUDGET {
            self.status = Status::Aborted;
            self.notes.push(format!("abort:{}", self.id));
            warn!("agent {} aborted: no partition table received", self.id);
            return Vec::new();
        }
        self.table_requests += 1;
        let Role::Joiner { bootstrap } = self.role else {
            return Vec::new();
        };
        vec![Action::Send {
            to: bootstrap,
            msg: Message::TableRequest { agent: self.id },
        }]
    }

    fn ack(&self) -> Vec<Action> {
        match self.role {
            Role::Joiner { bootstrap } if self.table.is_some() => vec![Action::Send {
                to: bootstrap,
                msg: Message::TableAck {
                    agent: self.id,
                    version: self.table_version,
                },
            }],
            _ => Vec::new(),
        }
    }

    /// Initiator: table members that never confirmed the table are removed
    /// and their partitions handed over with initial values.
    pub fn prune_unconfirmed(&mut self, blobs: &mut BlobStore) -> Result<Vec<Action>, ProtocolError> {
        if self.role != Role::Initiator {
            return Ok(Vec::new());
        }
        let Some(table) = self.table.as_ref() else {
            return Ok(Vec::new());
        };
        let silent: Vec<AgentId> = table
            .agents()
            .filter(|&a| a != self.id && !self.acked.contains(&a))
            .collect();
        let mut out = Vec::new();
        for agent in silent {
            let plan = self.table.as_ref().expect("checked").plan_leave(agent)?;
            let entries: Vec<HandoffEntry> = plan
                .reassignments
                .iter()
                .map(|r| {
                    let values = self.initial_slice(r.partition);
                    HandoffEntry {
                        partition: r.partition,
                        from: r.from,
                        to: r.to,
                        blob: blobs.put(encode_values(&values)),
                        version: 0,
                    }
                })
                .collect();
            warn!("agent {} never confirmed the table and is removed", agent);
            self.notes.push(format!("prune:{agent}"));
            out.extend(self.on_handoff(self.id, agent, entries.clone(), blobs)?);
            out.push(Action::Publish {
                topic: MEMBERSHIP_TOPIC.into(),
                msg: Message::Handoff { leaver: agent, entries },
            });
        }
        Ok(out)
    }

    /// Gives up if the table never arrived.
    pub fn abort_if_unjoined(&mut self) {
        if self.status == Status::Joining {
            self.status = Status::Aborted;
            self.notes.push(format!("abort:{}", self.id));
        }
    }

    fn adopt_table(&mut self, table: PartitionTable, version: u32) -> Vec<Action> {
        let mut out = Vec::new();
        let now_held = table.held_by(self.id);
        let dropped: Vec<PartitionId> = self
            .slots
            .keys()
            .filter(|k| !now_held.contains(k))
            .copied()
            .collect();
        for k in dropped {
            self.slots.remove(&k);
            out.push(Action::Unsubscribe(partition_topic(k)));
        }
        for &k in &now_held {
            if !self.slots.contains_key(&k) {
                let values = self.initial_slice(k);
                self.slots.insert(k, HeldSlot::new(values, self.round));
                self.cache.remove(&k);
                out.push(Action::Subscribe(partition_topic(k)));
            }
        }
        self.table = Some(table);
        self.table_version = version;
        if self.status == Status::Joining {
            self.status = Status::Active;
        }
        out
    }

    // ----- model access ----------------------------------------------------

    /// Non-held partitions with no cached value.
    pub fn missing_partitions(&self) -> Vec<PartitionId> {
        self.layout
            .ids()
            .filter(|k| !self.slots.contains_key(k) && !self.cache.contains_key(k))
            .collect()
    }

    /// Assembles held global sub-vectors and cached remote ones.
    pub fn load_model(&self) -> Result<FlatWeights, ProtocolError> {
        if let Some(&k) = self.missing_partitions().first() {
            return Err(ProtocolError::PartitionUnavailable(k));
        }
        let parts: Vec<SubVector> = self
            .layout
            .ids()
            .map(|k| {
                let values = match self.slots.get(&k) {
                    Some(slot) => slot.values.clone(),
                    None => self.cache[&k].values.clone(),
                };
                SubVector {
                    partition: k,
                    offset: self.layout.range(k).start,
                    values,
                }
            })
            .collect();
        Ok(assemble(&parts, self.layout.total())?)
    }

    fn is_suspect(&self, agent: AgentId) -> bool {
        self.suspects.get(&agent).is_some_and(|&until| self.round <= until)
    }

    /// Holder to talk to for `k`: skip suspects when possible, then least
    /// loaded, then lowest ID.
    fn choose_holder(&self, k: PartitionId) -> Option<AgentId> {
        let table = self.table.as_ref()?;
        let holders: Vec<AgentId> = table
            .lookup(k)
            .ok()?
            .into_iter()
            .filter(|&a| a != self.id)
            .collect();
        holders
            .iter()
            .copied()
            .min_by_key(|&a| (self.is_suspect(a), table.load(a), a))
    }

    /// Lowest-ID holder of `k`, the reference replica for repairs.
    fn anchor(&self, k: PartitionId) -> Option<AgentId> {
        self.table.as_ref()?.lookup(k).ok()?.first().copied()
    }

    fn fetch(&mut self, k: PartitionId, to: AgentId, purpose: FetchPurpose) -> Action {
        self.stats.fetches_sent += 1;
        self.pending_fetches.insert(k, to);
        Action::Send {
            to,
            msg: Message::Fetch {
                requester: self.id,
                round: self.round,
                partition: k,
                purpose,
            },
        }
    }

    // ----- round phases ----------------------------------------------------

    /// Opens round `round`: requests any partition the agent cannot assemble
    /// locally, or everything after a reconnection.
    pub fn begin_round(&mut self, round: u32) -> Vec<Action> {
        self.round = round;
        self.phase = Phase::Loading;
        self.suspects.retain(|_, until| *until >= round);
        if !self.is_active() {
            return Vec::new();
        }
        let mut out = Vec::new();
        if std::mem::take(&mut self.needs_refresh) {
            let ids: Vec<PartitionId> = self.layout.ids().collect();
            for k in ids {
                let target = if self.slots.contains_key(&k) {
                    self.table
                        .as_ref()
                        .and_then(|t| t.lookup(k).ok())
                        .and_then(|hs| hs.into_iter().find(|&a| a != self.id && !self.is_suspect(a)))
                } else {
                    self.choose_holder(k)
                };
                if let Some(to) = target {
                    out.push(self.fetch(k, to, FetchPurpose::Refresh));
                }
            }
        } else {
            for k in self.missing_partitions() {
                match self.choose_holder(k) {
                    Some(to) => out.push(self.fetch(k, to, FetchPurpose::Load)),
                    None => self.notes.push(format!("unavailable:{k}")),
                }
            }
        }
        out
    }

    /// LoadModel, local SGD, delta and UpdateModel in one step.
    pub fn train_and_update(&mut self) -> Result<Vec<Action>, ProtocolError> {
        self.phase = Phase::Training;
        if !self.is_active() {
            return Ok(Vec::new());
        }
        let base = match self.load_model() {
            Ok(w) => w,
            Err(ProtocolError::PartitionUnavailable(k)) => {
                self.stats.rounds_skipped += 1;
                self.notes.push(format!("skip:{}:{k}", self.id));
                return Ok(Vec::new());
            }
            Err(e) => return Err(e),
        };
        let cfg = self.params.fit_config(self.id, self.round);
        let trained = sgd_fit(&self.params.spec, &base, &self.shard, &cfg)?;
        let deltas = compute_delta(&base, &trained, &self.layout)?;
        self.stats.rounds_trained += 1;
        Ok(self.update_model(deltas))
    }

    /// Applies own deltas to held partitions and ships the rest to holders.
    pub fn update_model(&mut self, deltas: Vec<SubVector>) -> Vec<Action> {
        let mut out = Vec::new();
        for sub in deltas {
            let k = sub.partition;
            if let Some(slot) = self.slots.get_mut(&k) {
                slot.pending.insert((self.id, self.round), sub.values);
                continue;
            }
            let Some(holder) = self.choose_holder(k) else {
                self.notes.push(format!("unavailable:{k}"));
                continue;
            };
            self.stats.updates_sent += 1;
            out.push(Action::Send {
                to: holder,
                msg: Message::Update(UpdateMessage {
                    sender: self.id,
                    round: self.round,
                    partition: k,
                    delta: sub.values.clone(),
                }),
            });
            self.outstanding.insert(
                k,
                Outstanding {
                    holder,
                    round: self.round,
                    delta: sub.values,
                },
            );
        }
        out
    }

    /// Publishes, per held partition, the sum of the deltas this holder
    /// received itself, so co-holders can aggregate over the union.
    pub fn collect_deadline(&mut self) -> Vec<Action> {
        self.phase = Phase::Collected;
        if !self.is_active() {
            return Vec::new();
        }
        let Some(table) = self.table.as_ref() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (&k, slot) in &self.slots {
            if table.replication(k) < 2 {
                continue;
            }
            let sum = if slot.pending.is_empty() {
                Vec::new()
            } else {
                sum_deltas(slot.values.len(), slot.pending.values())
            };
            out.push(Action::Publish {
                topic: partition_topic(k),
                msg: Message::ReplicaSync(ReplicaSyncMessage {
                    origin: self.id,
                    partition: k,
                    round: self.round,
                    digest: digest(&slot.values),
                    submitters: slot.pending.keys().copied().collect(),
                    sum,
                }),
            });
        }
        out
    }

    /// Aggregates every held partition over its own deltas plus the co-holder
    /// sums, added in ascending `(holder, round)` order, and replies to the
    /// agents that submitted directly.
    pub fn aggregate_deadline(&mut self) -> Result<Vec<Action>, ProtocolError> {
        self.phase = Phase::Aggregated;
        if !self.is_active() {
            return Ok(Vec::new());
        }
        let mode = self.params.epsilon;
        let round = self.round;
        let mut out = Vec::new();
        for (&k, slot) in self.slots.iter_mut() {
            let own = std::mem::take(&mut slot.pending);
            let mut parts = std::mem::take(&mut slot.groups);
            if !own.is_empty() {
                parts.insert(
                    (self.id, round),
                    Group {
                        sum: sum_deltas(slot.values.len(), own.values()),
                        keys: own.into_keys().collect(),
                    },
                );
            }
            let r: usize = parts.values().map(|g| g.keys.len()).sum();
            if r > 0 {
                let mut parts = parts.values();
                let mut total = parts.next().expect("non-empty").sum.clone();
                for g in parts {
                    for (t, v) in total.iter_mut().zip(&g.sum) {
                        *t += v;
                    }
                }
                apply_sum(&mut slot.values, &mut slot.epsilon, &total, r, mode)?;
            }
            for g in parts.into_values() {
                slot.applied.extend(g.keys);
            }
            slot.applied
                .retain(|&(_, origin)| origin + STALE_ROUNDS >= round);
            slot.version = round;
            slot.pending = std::mem::take(&mut slot.overflow);
            slot.groups = std::mem::take(&mut slot.group_overflow);
            let reply_to = std::mem::replace(&mut slot.reply_to, std::mem::take(&mut slot.reply_overflow));
            for to in reply_to {
                out.push(Action::Send {
                    to,
                    msg: Message::UpdateReply(ReplyMessage {
                        responder: self.id,
                        round,
                        partition: k,
                        values: slot.values.clone(),
                    }),
                });
            }
        }
        Ok(out)
    }

    /// Closes the round: holders that never answered become suspects.
    pub fn end_round(&mut self) {
        let until = self.round + SUSPECT_ROUNDS;
        let silent: Vec<AgentId> = self
            .outstanding
            .values()
            .map(|o| o.holder)
            .chain(self.pending_fetches.values().copied())
            .collect();
        for holder in silent {
            self.suspects.insert(holder, until);
        }
        self.outstanding.clear();
        self.pending_fetches.clear();
    }

    // ----- message handling ------------------------------------------------

    pub fn on_message(
        &mut self,
        src: AgentId,
        msg: Message,
        blobs: &BlobStore,
    ) -> Result<Vec<Action>, ProtocolError> {
        if matches!(self.status, Status::Departed | Status::Aborted) {
            return Ok(Vec::new());
        }
        match msg {
            Message::Announce(a) => Ok(self.on_announce(a)),
            Message::JoinOffer { agent, storage } => self.on_join_offer(agent, storage),
            Message::Table { version, text } => self.on_table(version, &text),
            Message::TableRequest { agent } => Ok(self.on_table_request(agent)),
            Message::Fetch {
                requester,
                partition,
                purpose,
                ..
            } => Ok(self.on_fetch(requester, partition, purpose)),
            Message::FetchReply { reply, purpose } => Ok(self.on_fetch_reply(reply, purpose)),
            Message::Update(u) => Ok(self.on_update(u)),
            Message::UpdateReply(r) => Ok(self.on_update_reply(r)),
            Message::ReplicaSync(s) => Ok(self.on_replica_sync(s)),
            Message::Handoff { leaver, entries } => self.on_handoff(src, leaver, entries, blobs),
            Message::TableAck { agent, .. } => {
                if self.role == Role::Initiator {
                    self.acked.insert(agent);
                }
                Ok(Vec::new())
            }
        }
    }

    fn on_announce(&mut self, a: Announce) -> Vec<Action> {
        let Role::Joiner { .. } = self.role else {
            return Vec::new();
        };
        let matches = a.layer_sizes.iter().map(|&n| n as usize).eq(self.params.spec.layer_sizes().iter().copied())
            && a.partitions == self.params.partitions
            && a.pi == self.params.pi
            && a.rho == self.params.rho;
        if !matches {
            warn!("agent {} ignores announcement for a different model", self.id);
            return Vec::new();
        }
        self.role = Role::Joiner { bootstrap: a.initiator };
        self.announce_seen = true;
        if self.status != Status::Joining {
            return Vec::new();
        }
        vec![Action::Send {
            to: a.initiator,
            msg: Message::JoinOffer {
                agent: self.id,
                storage: self.storage_offer,
            },
        }]
    }

    fn on_join_offer(&mut self, agent: AgentId, storage: u64) -> Result<Vec<Action>, ProtocolError> {
        if self.role != Role::Initiator || self.offers.iter().any(|&(a, _)| a == agent) {
            return Ok(Vec::new());
        }
        self.offers.push((agent, storage));
        if !self.finalized {
            return Ok(Vec::new());
        }
        // Late arrival: admit it while training has not started, otherwise it
        // participates as a trainer only.
        let mut table = self.table.clone().ok_or(ProtocolError::NotInitialized(self.id))?;
        if self.round == 0 {
            table.join_with_storage(agent, storage, self.params.partition_bytes())?;
            return Ok(self.install_and_broadcast(table));
        }
        Ok(vec![Action::Send {
            to: agent,
            msg: Message::Table {
                version: self.table_version,
                text: table.to_canonical_text(),
            },
        }])
    }

    fn on_table(&mut self, version: u32, text: &str) -> Result<Vec<Action>, ProtocolError> {
        if version <= self.table_version {
            return Ok(Vec::new());
        }
        let table: PartitionTable = text.parse()?;
        let mut out = self.adopt_table(table, version);
        out.extend(self.ack());
        Ok(out)
    }

    fn on_table_request(&mut self, agent: AgentId) -> Vec<Action> {
        match (&self.table, self.role) {
            (Some(table), Role::Initiator) => vec![Action::Send {
                to: agent,
                msg: Message::Table {
                    version: self.table_version,
                    text: table.to_canonical_text(),
                },
            }],
            _ => Vec::new(),
        }
    }

    fn on_fetch(&mut self, requester: AgentId, k: PartitionId, purpose: FetchPurpose) -> Vec<Action> {
        let Some(slot) = self.slots.get(&k) else {
            debug!("agent {} got a fetch for partition {k} it does not hold", self.id);
            return Vec::new();
        };
        vec![Action::Send {
            to: requester,
            msg: Message::FetchReply {
                reply: ReplyMessage {
                    responder: self.id,
                    round: slot.version,
                    partition: k,
                    values: slot.values.clone(),
                },
                purpose,
            },
        }]
    }

    fn store_in_cache(&mut self, reply: ReplyMessage) {
        if reply.values.len() != self.layout.len_of(reply.partition) {
            warn!("agent {} dropped a reply with the wrong length", self.id);
            return;
        }
        let fresher = self
            .cache
            .get(&reply.partition)
            .is_none_or(|c| reply.round >= c.version);
        if fresher {
            self.cache.insert(
                reply.partition,
                Cached {
                    values: reply.values,
                    version: reply.round,
                },
            );
        }
    }

    fn on_fetch_reply(&mut self, reply: ReplyMessage, purpose: FetchPurpose) -> Vec<Action> {
        let k = reply.partition;
        if !self.layout.contains(k) {
            return Vec::new();
        }
        if self.pending_fetches.get(&k) == Some(&reply.responder) {
            self.pending_fetches.remove(&k);
        }
        self.suspects.remove(&reply.responder);
        let phase = self.phase;
        let round = self.round;
        match self.slots.get_mut(&k) {
            None => self.store_in_cache(reply),
            Some(slot) => {
                let adopt = match purpose {
                    FetchPurpose::Load => false,
                    FetchPurpose::Repair => phase != Phase::Aggregated && reply.round >= slot.version,
                    FetchPurpose::Refresh => reply.round >= slot.version,
                };
                if adopt && reply.values.len() == slot.values.len() {
                    slot.values = reply.values;
                    slot.version = reply.round;
                    if purpose == FetchPurpose::Repair {
                        self.stats.repairs += 1;
                        self.notes.push(format!("repair:{}:{k}@{round}", self.id));
                    }
                }
            }
        }
        Vec::new()
    }

    fn on_update(&mut self, u: UpdateMessage) -> Vec<Action> {
        let round = self.round;
        let phase = self.phase;
        let Some(slot) = self.slots.get_mut(&u.partition) else {
            debug!("agent {} ignores an update for partition {}", self.id, u.partition);
            return Vec::new();
        };
        if u.delta.len() != slot.values.len() || u.round + STALE_ROUNDS < round {
            return Vec::new();
        }
        let key = (u.sender, u.round);
        let late = phase == Phase::Collected;
        if late {
            slot.reply_overflow.insert(u.sender);
        } else {
            slot.reply_to.insert(u.sender);
        }
        if slot.knows(&key) {
            return Vec::new();
        }
        let entry = u.delta;
        if late {
            slot.overflow.insert(key, entry);
        } else {
            slot.pending.insert(key, entry);
        }
        Vec::new()
    }

    fn on_update_reply(&mut self, reply: ReplyMessage) -> Vec<Action> {
        let k = reply.partition;
        if self.outstanding.get(&k).is_some_and(|o| o.holder == reply.responder) {
            self.outstanding.remove(&k);
        }
        self.suspects.remove(&reply.responder);
        if self.slots.contains_key(&k) || !self.layout.contains(k) {
            return Vec::new();
        }
        self.store_in_cache(reply);
        Vec::new()
    }

    fn on_replica_sync(&mut self, s: ReplicaSyncMessage) -> Vec<Action> {
        let k = s.partition;
        if s.origin == self.id {
            return Vec::new();
        }
        let anchor = self.anchor(k);
        let (round, phase, id) = (self.round, self.phase, self.id);
        let Some(slot) = self.slots.get_mut(&k) else {
            debug!("agent {id} ignores replica sync for partition {k} it does not hold");
            return Vec::new();
        };
        let current = s.round == round && phase != Phase::Aggregated;
        // A sum overlapping anything already counted cannot be split, so it
        // is dropped and the digest repair restores agreement.
        let usable = !s.submitters.is_empty()
            && s.sum.len() == slot.values.len()
            && s.submitters
                .iter()
                .all(|k| k.1 + STALE_ROUNDS >= round && !slot.knows(k))
            && s.submitters.windows(2).all(|w| w[0] < w[1]);
        if usable {
            let group = Group {
                keys: s.submitters,
                sum: s.sum,
            };
            let key = (s.origin, s.round);
            if current || phase != Phase::Collected {
                slot.groups.entry(key).or_insert(group);
            } else {
                slot.group_overflow.entry(key).or_insert(group);
            }
        }
        let mut out = Vec::new();
        if current
            && anchor == Some(s.origin)
            && anchor != Some(id)
            && slot.repair_round != Some(round)
            && digest(&slot.values) != s.digest
        {
            slot.repair_round = Some(round);
            out.push(self.fetch(k, s.origin, FetchPurpose::Repair));
        }
        out
    }

    // ----- departure and reconnection -------------------------------------

    /// Leaves the process: partitions held alone are uploaded to the blob
    /// store and handed to successors announced on the membership topic.
    /// The last holder persists everything and gets [`ProtocolError::LastAgent`].
    pub fn terminate(
        &mut self,
        blobs: &mut BlobStore,
    ) -> Result<(HandoffPlan, Vec<Action>), ProtocolError> {
        let table = self.table.clone().ok_or(ProtocolError::NotInitialized(self.id))?;
        let plan = if table.contains_agent(self.id) {
            match table.plan_leave(self.id) {
                Ok(plan) => plan,
                Err(crate::partition::PartitionError::NoSuccessor(_)) => {
                    for slot in self.slots.values() {
                        blobs.put(encode_values(&slot.values));
                    }
                    self.status = Status::Departed;
                    return Err(ProtocolError::LastAgent);
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            HandoffPlan {
                leaver: Some(self.id),
                reassignments: Vec::new(),
            }
        };
        let entries = plan
            .reassignments
            .iter()
            .map(|r| {
                let slot = &self.slots[&r.partition];
                HandoffEntry {
                    partition: r.partition,
                    from: r.from,
                    to: r.to,
                    blob: blobs.put(encode_values(&slot.values)),
                    version: slot.version,
                }
            })
            .collect();
        self.status = Status::Departed;
        let out = vec![Action::Publish {
            topic: MEMBERSHIP_TOPIC.into(),
            msg: Message::Handoff {
                leaver: self.id,
                entries,
            },
        }];
        Ok((plan, out))
    }

    fn on_handoff(
        &mut self,
        _src: AgentId,
        leaver: AgentId,
        entries: Vec<HandoffEntry>,
        blobs: &BlobStore,
    ) -> Result<Vec<Action>, ProtocolError> {
        let Some(table) = self.table.as_mut() else {
            return Ok(Vec::new());
        };
        if leaver == self.id {
            // Removed while still running: continue as a trainer only.
            if table.contains_agent(leaver) {
                let plan = table.plan_leave(leaver)?;
                table.apply_leave(&plan)?;
            }
            let mut out = Vec::new();
            for k in std::mem::take(&mut self.slots).into_keys() {
                out.push(Action::Unsubscribe(partition_topic(k)));
            }
            self.needs_refresh = true;
            return Ok(out);
        }
        if table.contains_agent(leaver) {
            let plan = HandoffPlan {
                leaver: Some(leaver),
                reassignments: entries
                    .iter()
                    .map(|e| Reassignment {
                        partition: e.partition,
                        from: e.from,
                        to: e.to,
                    })
                    .collect(),
            };
            table.apply_leave(&plan)?;
        }
        self.suspects.remove(&leaver);
        let mut out = Vec::new();
        for e in entries.iter().filter(|e| e.to == self.id) {
            let Some(bytes) = blobs.get(&e.blob) else {
                warn!("agent {} could not download partition {}", self.id, e.partition);
                continue;
            };
            let values = decode_values(bytes)?;
            match self.slots.get_mut(&e.partition) {
                Some(slot) => {
                    for (mine, theirs) in slot.values.iter_mut().zip(&values) {
                        *mine = 0.5 * (*mine + theirs);
                    }
                }
                None => {
                    self.slots.insert(e.partition, HeldSlot::new(values, e.version));
                    self.cache.remove(&e.partition);
                    out.push(Action::Subscribe(partition_topic(e.partition)));
                }
            }
            self.notes.push(format!("handoff:{}->{}", e.partition, self.id));
        }
        // Updates the leaver never answered go to the new responsible agent.
        let orphaned: Vec<PartitionId> = self
            .outstanding
            .iter()
            .filter(|(_, o)| o.holder == leaver && o.round == self.round)
            .map(|(&k, _)| k)
            .collect();
        for k in orphaned {
            let o = self.outstanding.remove(&k).expect("listed");
            if let Some(slot) = self.slots.get_mut(&k) {
                slot.pending.entry((self.id, o.round)).or_insert(o.delta);
                continue;
            }
            let Some(holder) = self.choose_holder(k) else {
                continue;
            };
            self.stats.redelivered += 1;
            out.push(Action::Send {
                to: holder,
                msg: Message::Update(UpdateMessage {
                    sender: self.id,
                    round: o.round,
                    partition: k,
                    delta: o.delta.clone(),
                }),
            });
            self.outstanding.insert(
                k,
                Outstanding {
                    holder,
                    round: o.round,
                    delta: o.delta,
                },
            );
        }
        let refetch: Vec<PartitionId> = self
            .pending_fetches
            .iter()
            .filter(|(_, &a)| a == leaver)
            .map(|(&k, _)| k)
            .collect();
        for k in refetch {
            self.pending_fetches.remove(&k);
            if self.slots.contains_key(&k) {
                continue;
            }
            if let Some(to) = self.choose_holder(k) {
                out.push(self.fetch(k, to, FetchPurpose::Load));
            }
        }
        Ok(out)
    }

    /// Comes back after a short absence. Held partitions were not reassigned
    /// in the meantime; every partition is refreshed at the next round start.
    pub fn reconnect(&mut self, mode: MemoryMode) {
        if mode == MemoryMode::Memoryless {
            self.cache.clear();
            let ids: Vec<PartitionId> = self.slots.keys().copied().collect();
            for k in ids {
                let values = self.initial_slice(k);
                self.slots.insert(k, HeldSlot::new(values, 0));
            }
        }
        self.outstanding.clear();
        self.pending_fetches.clear();
        self.needs_refresh = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn params(k: u32, pi: u32, rho: u32) -> AgentParams {
        AgentParams {
            spec: ModelSpec::new(vec![3, 4], 5).unwrap(),
            partitions: k,
            pi,
            rho,
            epsilon: EpsilonMode::Ema { alpha: 0.5 },
            train: TrainConfig {
                learning_rate: 0.1,
                batch_size: 2,
                local_iterations: 1,
                seed: 1,
            },
        }
    }

    fn shard() -> DatasetShard {
        let mut s = DatasetShard::new(AgentId(1), 3);
        s.push(&[1.0, 0.0, 1.0], 0);
        s.push(&[0.0, 1.0, 1.0], 3);
        s
    }

    fn agent(id: u32, p: &AgentParams, table: &PartitionTable) -> Agent {
        let role = if id == 1 { Role::Initiator } else { Role::Joiner { bootstrap: AgentId(1) } };
        let mut a = Agent::new(AgentId(id), role, p.clone(), shard(), u64::MAX).unwrap();
        a.adopt_table(table.clone(), 1);
        a
    }

    fn six_partition_table() -> PartitionTable {
        let mut t = PartitionTable::bootstrap(6, 4, 2, AgentId(1)).unwrap();
        t.join(AgentId(2)).unwrap();
        t.join(AgentId(3)).unwrap();
        t
    }

    #[test]
    fn silent_members_are_pruned() {
        let p = params(6, 4, 2);
        let mut init = agent(1, &p, &six_partition_table());
        init.finalized = true;
        init.on_message(AgentId(2), Message::TableAck { agent: AgentId(2), version: 1 }, &BlobStore::default())
            .unwrap();
        let mut blobs = BlobStore::default();
        let out = init.prune_unconfirmed(&mut blobs).unwrap();
        let table = init.table().unwrap();
        assert!(!table.contains_agent(AgentId(3)));
        assert!(table.contains_agent(AgentId(2)));
        assert!(table.validate().is_ok());
        assert!(out.iter().any(|a| matches!(a, Action::Publish { msg: Message::Handoff { leaver: AgentId(3), .. }, .. })));
        assert!(init.prune_unconfirmed(&mut blobs).unwrap().is_empty());

        let mut evicted = agent(3, &p, &six_partition_table());
        let Some(Action::Publish { msg: Message::Handoff { leaver, entries }, .. }) = out.into_iter().last() else {
            panic!("handoff expected");
        };
        evicted.on_message(AgentId(1), Message::Handoff { leaver, entries }, &blobs).unwrap();
        assert!(evicted.is_trainer_only());
        assert!(evicted.held().is_empty());
    }

    #[test]
    fn full_holder_loads_without_traffic() {
        let p = params(6, 4, 2);
        let t = PartitionTable::bootstrap(6, 4, 2, AgentId(1)).unwrap();
        let mut a = agent(1, &p, &t);
        assert!(a.begin_round(1).is_empty());
        assert_eq!(a.load_model().unwrap(), init_weights(&p.spec));
        let out = a.train_and_update().unwrap();
        assert!(out.is_empty(), "holder of every partition sends nothing");
    }

    #[test]
    fn missing_partitions_are_fetched_from_holders() {
        let p = params(6, 4, 2);
        let mut a = agent(1, &p, &six_partition_table());
        let out = a.begin_round(1);
        let targets: Vec<(AgentId, PartitionId)> = out
            .iter()
            .filter_map(|act| match act {
                Action::Send { to, msg: Message::Fetch { partition, .. } } => Some((*to, *partition)),
                _ => None,
            })
            .collect();
        assert_eq!(targets, vec![(AgentId(2), PartitionId(5)), (AgentId(2), PartitionId(6))]);
        assert!(matches!(a.load_model(), Err(ProtocolError::PartitionUnavailable(_))));
    }

    #[test]
    fn trainer_only_sends_every_partition() {
        let p = params(6, 4, 2);
        let t = six_partition_table();
        let mut a = Agent::new(AgentId(4), Role::Joiner { bootstrap: AgentId(1) }, p.clone(), shard(), u64::MAX).unwrap();
        a.adopt_table(t, 1);
        assert!(a.is_trainer_only());
        for k in 1..=6 {
            let range = a.layout().range(PartitionId(k));
            a.store_in_cache(ReplyMessage {
                responder: AgentId(1),
                round: 0,
                partition: PartitionId(k),
                values: vec![0.0; range.len()],
            });
        }
        a.begin_round(1);
        let out = a.train_and_update().unwrap();
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn mixed_round_cache_is_accepted() {
        let p = params(2, 1, 1);
        let mut t = PartitionTable::bootstrap(2, 1, 1, AgentId(1)).unwrap();
        t.join(AgentId(2)).unwrap();
        let mut a = agent(1, &p, &t);
        let len = a.layout().len_of(PartitionId(2));
        a.round = 5;
        a.store_in_cache(ReplyMessage { responder: AgentId(2), round: 4, partition: PartitionId(2), values: vec![1.0; len] });
        assert!(a.load_model().is_ok());
        // An older reply never overwrites a fresher one.
        a.store_in_cache(ReplyMessage { responder: AgentId(2), round: 3, partition: PartitionId(2), values: vec![2.0; len] });
        assert_eq!(a.cached_values(PartitionId(2)).unwrap()[0], 1.0);
    }

    #[test]
    fn duplicate_submitters_count_once() {
        let p = params(6, 4, 2);
        let t = six_partition_table();
        let mut a = agent(1, &p, &t);
        a.begin_round(1);
        a.phase = Phase::Training;
        let len = a.layout().len_of(PartitionId(1));
        let upd = UpdateMessage { sender: AgentId(4), round: 1, partition: PartitionId(1), delta: vec![0.1; len] };
        a.on_update(upd.clone());
        a.on_replica_sync(ReplicaSyncMessage {
            origin: AgentId(3),
            partition: PartitionId(1),
            round: 1,
            digest: digest(a.global_values(PartitionId(1)).unwrap()),
            submitters: vec![(AgentId(4), 1)],
            sum: vec![0.1; len],
        });
        assert_eq!(a.slots[&PartitionId(1)].pending.len(), 1);
        assert!(a.slots[&PartitionId(1)].groups.is_empty());
        let out = a.aggregate_deadline().unwrap();
        assert_eq!(a.epsilon(PartitionId(1)), Some(1.0));
        assert_eq!(out.len(), 1, "one reply to the direct submitter");
    }

    #[test]
    fn sync_for_unheld_partition_is_ignored() {
        let p = params(6, 4, 2);
        let mut a = agent(2, &p, &six_partition_table());
        let out = a.on_replica_sync(ReplicaSyncMessage {
            origin: AgentId(1),
            partition: PartitionId(1),
            round: 0,
            digest: 0,
            submitters: vec![],
            sum: vec![],
        });
        assert!(out.is_empty());
    }

    #[test]
    fn reconnect_modes() {
        let p = params(6, 4, 2);
        let t = six_partition_table();
        let mut a = agent(1, &p, &t);
        a.slots.get_mut(&PartitionId(1)).unwrap().epsilon = Some(0.4);
        let before = (a.slots.clone(), a.cache.clone());
        a.reconnect(MemoryMode::WithMemory);
        assert_eq!((a.slots.clone(), a.cache.clone()), before);

        a.slots.get_mut(&PartitionId(1)).unwrap().values[0] = 42.0;
        a.reconnect(MemoryMode::Memoryless);
        assert!(a.epsilons().next().is_none());
        assert_ne!(a.global_values(PartitionId(1)).unwrap()[0], 42.0);
        let refresh = a.begin_round(3);
        assert_eq!(refresh.len(), 6, "every partition is refreshed");
    }
}
