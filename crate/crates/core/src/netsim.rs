//! Deterministic discrete-event network.
//!
//! Time is integer microseconds. Events are processed in `(time, sequence)`
//! order where the sequence number is a global enqueue counter, so equal-time
//! events come out in the order they were scheduled. Every envelope draws its
//! loss and latency from one seeded stream; the whole run is a function of the
//! configuration and the order of calls made by the driver.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::AgentId;

pub type SimTime = u64;

pub const MICROS_PER_MS: f64 = 1000.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("round {0} is still open")]
    RoundOpen(u32),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
}

/// What a reconnecting agent keeps from before its absence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMode {
    Memoryless,
    WithMemory,
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Memoryless => "memoryless",
            Self::WithMemory => "memory",
        })
    }
}

/// Agent offline for rounds `from_round..=to_round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Disconnect {
    pub agent: AgentId,
    pub from_round: u32,
    pub to_round: u32,
    pub memory: MemoryMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub latency_mean_ms: f64,
    pub latency_jitter_ms: f64,
    pub drop_prob: f64,
    pub seed: u64,
    pub disconnects: Vec<Disconnect>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latency_mean_ms: 20.0,
            latency_jitter_ms: 10.0,
            drop_prob: 0.0,
            seed: 0,
            disconnects: Vec::new(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if !(self.latency_mean_ms >= 0.0 && self.latency_mean_ms.is_finite()) {
            return bad("latency_mean_ms must be >= 0".into());
        }
        if !(self.latency_jitter_ms >= 0.0 && self.latency_jitter_ms.is_finite()) {
            return bad("latency_jitter_ms must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return bad("drop_prob must be in [0, 1)".into());
        }
        for d in &self.disconnects {
            if d.from_round > d.to_round {
                return bad(format!("disconnect of agent {} ends before it starts", d.agent));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub src: AgentId,
    pub dst: AgentId,
    /// Topic for pub/sub copies, `None` for direct messages.
    pub topic: Option<String>,
    pub payload: Vec<u8>,
    pub send_time: SimTime,
    pub deliver_time: SimTime,
    pub dropped: bool,
    /// Ledger round in which the envelope was sent.
    pub round: u32,
    /// Set on replies produced through [`Simulator::reply`] and on the
    /// original request.
    pub request: Option<RequestId>,
}

impl Envelope {
    pub fn kind(&self) -> u8 {
        self.payload.first().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Deliver(Envelope),
    Timeout { agent: AgentId, request: RequestId },
    Timer { agent: AgentId, token: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Delivered,
    Dropped,
    Unreachable,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Delivered => "deliver",
            Self::Dropped => "drop",
            Self::Unreachable => "unreachable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub src: AgentId,
    pub dst: AgentId,
    pub topic: Option<String>,
    pub kind: u8,
    pub bytes: usize,
    pub outcome: Outcome,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {}",
            self.time,
            self.src,
            self.dst,
            self.topic.as_deref().unwrap_or("-"),
            self.kind,
            self.bytes,
            self.outcome
        )
    }
}

/// Counters for one agent in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LedgerEntry {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    /// Bytes sent per message kind (first payload byte).
    pub sent_by_kind: [u64; 16],
    pub received_by_kind: [u64; 16],
}

/// Byte accounting keyed by `(round, agent)`. Both directions of an envelope
/// are charged to the round in which it was sent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficLedger {
    entries: BTreeMap<(u32, AgentId), LedgerEntry>,
}

impl TrafficLedger {
    pub fn entry(&self, round: u32, agent: AgentId) -> LedgerEntry {
        self.entries.get(&(round, agent)).copied().unwrap_or_default()
    }

    fn entry_mut(&mut self, round: u32, agent: AgentId) -> &mut LedgerEntry {
        self.entries.entry((round, agent)).or_default()
    }

    pub fn round(&self, round: u32) -> BTreeMap<AgentId, LedgerEntry> {
        self.entries
            .range((round, AgentId(0))..=(round, AgentId(u32::MAX)))
            .map(|(&(_, a), &e)| (a, e))
            .collect()
    }

    pub fn round_totals(&self, round: u32) -> LedgerEntry {
        let mut total = LedgerEntry::default();
        for e in self.round(round).values() {
            total.bytes_sent += e.bytes_sent;
            total.bytes_received += e.bytes_received;
            total.messages_sent += e.messages_sent;
            total.messages_dropped += e.messages_dropped;
            for k in 0..16 {
                total.sent_by_kind[k] += e.sent_by_kind[k];
                total.received_by_kind[k] += e.received_by_kind[k];
            }
        }
        total
    }
}

/// Reliable content-addressed store standing in for a shared file system.
#[derive(Debug, Clone, Default)]
pub struct BlobStore {
    blobs: BTreeMap<[u8; 32], Vec<u8>>,
}

impl BlobStore {
    pub fn put(&mut self, bytes: Vec<u8>) -> [u8; 32] {
        let hash: [u8; 32] = Sha256::digest(&bytes).into();
        self.blobs.insert(hash, bytes);
        hash
    }

    pub fn get(&self, hash: &[u8; 32]) -> Option<&[u8]> {
        self.blobs.get(hash).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }
}

#[derive(Debug)]
struct Scheduled {
    time: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// How far [`Simulator::run_until`] should go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Limit {
    /// Process every event with `time <= t`, then advance the clock to `t`.
    Time(SimTime),
    /// Process until the queue is empty.
    Drained,
}

pub struct Simulator {
    cfg: NetConfig,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    rng: ChaCha8Rng,
    subscriptions: BTreeMap<String, BTreeSet<AgentId>>,
    offline: BTreeSet<AgentId>,
    departed: BTreeSet<AgentId>,
    pending_requests: BTreeMap<RequestId, AgentId>,
    next_request: u64,
    round: u32,
    closed_through: Option<u32>,
    ledger: TrafficLedger,
    trace: Vec<TraceRecord>,
    pub blobs: BlobStore,
}

impl Simulator {
    pub fn new(cfg: NetConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            rng,
            subscriptions: BTreeMap::new(),
            offline: BTreeSet::new(),
            departed: BTreeSet::new(),
            pending_requests: BTreeMap::new(),
            next_request: 0,
            round: 0,
            closed_through: None,
            ledger: TrafficLedger::default(),
            trace: Vec::new(),
            blobs: BlobStore::default(),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// Opens a new ledger round; the previous one is closed.
    pub fn begin_round(&mut self, round: u32) {
        if round > self.round {
            self.closed_through = Some(round - 1);
        }
        self.round = round;
    }

    pub fn close_round(&mut self) {
        self.closed_through = Some(self.round);
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    /// Per-agent counters of a closed round.
    pub fn ledger_snapshot(&self, round: u32) -> Result<BTreeMap<AgentId, LedgerEntry>, NetError> {
        match self.closed_through {
            Some(c) if round <= c => Ok(self.ledger.round(round)),
            _ => Err(NetError::RoundOpen(round)),
        }
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn trace_lines(&self) -> String {
        self.trace.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn is_online(&self, agent: AgentId) -> bool {
        !self.offline.contains(&agent) && !self.departed.contains(&agent)
    }

    pub fn disconnect(&mut self, agent: AgentId) {
        self.offline.insert(agent);
    }

    pub fn reconnect(&mut self, agent: AgentId) {
        self.offline.remove(&agent);
    }

    /// Permanently removes an agent and its subscriptions.
    pub fn remove_node(&mut self, agent: AgentId) {
        self.departed.insert(agent);
        for subs in self.subscriptions.values_mut() {
            subs.remove(&agent);
        }
    }

    pub fn subscribe(&mut self, agent: AgentId, topic: &str) {
        self.subscriptions
            .entry(topic.to_string())
            .or_default()
            .insert(agent);
    }

    pub fn unsubscribe(&mut self, agent: AgentId, topic: &str) {
        if let Some(subs) = self.subscriptions.get_mut(topic) {
            subs.remove(&agent);
        }
    }

    pub fn subscribers(&self, topic: &str) -> Vec<AgentId> {
        self.subscriptions
            .get(topic)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    fn push(&mut self, time: SimTime, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            time,
            seq: self.seq,
            event,
        }));
    }

    fn sample_latency(&mut self) -> SimTime {
        let u: f64 = self.rng.random();
        let ms = self.cfg.latency_mean_ms + self.cfg.latency_jitter_ms * (2.0 * u - 1.0);
        (ms.max(0.0) * MICROS_PER_MS).round() as SimTime
    }

    fn transmit(
        &mut self,
        src: AgentId,
        dst: AgentId,
        topic: Option<String>,
        payload: Vec<u8>,
        request: Option<RequestId>,
    ) {
        let drop_draw: f64 = self.rng.random();
        let latency = self.sample_latency();
        let dropped = drop_draw < self.cfg.drop_prob;
        let bytes = payload.len() as u64;
        let kind = payload.first().copied().unwrap_or(0);
        let round = self.round;
        {
            let e = self.ledger.entry_mut(round, src);
            e.bytes_sent += bytes;
            e.messages_sent += 1;
            e.sent_by_kind[usize::from(kind & 0x0f)] += bytes;
            if dropped {
                e.messages_dropped += 1;
            }
        }
        let env = Envelope {
            src,
            dst,
            topic,
            payload,
            send_time: self.now,
            deliver_time: self.now + latency,
            dropped,
            round,
            request,
        };
        if dropped {
            self.trace.push(TraceRecord {
                time: self.now,
                src,
                dst,
                topic: env.topic.clone(),
                kind,
                bytes: env.payload.len(),
                outcome: Outcome::Dropped,
            });
            return;
        }
        let at = env.deliver_time;
        self.push(at, Event::Deliver(env));
    }

    /// Fans a payload out to every current subscriber except the sender.
    /// Returns the number of envelopes created.
    pub fn publish(&mut self, topic: &str, payload: &[u8], src: AgentId) -> usize {
        if !self.is_online(src) {
            return 0;
        }
        let targets: Vec<AgentId> = self
            .subscribers(topic)
            .into_iter()
            .filter(|&a| a != src)
            .collect();
        for &dst in &targets {
            self.transmit(src, dst, Some(topic.to_string()), payload.to_vec(), None);
        }
        targets.len()
    }

    /// Direct message. Returns `false` when the sender is offline.
    pub fn send(&mut self, dst: AgentId, payload: Vec<u8>, src: AgentId) -> bool {
        if !self.is_online(src) {
            return false;
        }
        self.transmit(src, dst, None, payload, None);
        true
    }

    /// Direct message with a timeout signalled back to `src` unless a reply
    /// is delivered first.
    pub fn request(
        &mut self,
        dst: AgentId,
        payload: Vec<u8>,
        src: AgentId,
        timeout: SimTime,
    ) -> RequestId {
        self.next_request += 1;
        let id = RequestId(self.next_request);
        self.pending_requests.insert(id, src);
        let at = self.now + timeout;
        self.push(at, Event::Timeout { agent: src, request: id });
        if self.is_online(src) {
            self.transmit(src, dst, None, payload, Some(id));
        }
        id
    }

    /// Answers a request delivered earlier.
    pub fn reply(&mut self, request: RequestId, requester: AgentId, payload: Vec<u8>, src: AgentId) -> bool {
        if !self.is_online(src) {
            return false;
        }
        self.transmit(src, requester, None, payload, Some(request));
        true
    }

    pub fn schedule_timer(&mut self, agent: AgentId, at: SimTime, token: u64) {
        let at = at.max(self.now);
        self.push(at, Event::Timer { agent, token });
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Pops the next event no later than `limit`. Envelopes addressed to
    /// offline agents are consumed here and never returned.
    pub fn next_event(&mut self, limit: Limit) -> Option<Event> {
        loop {
            let due = match (self.queue.peek(), limit) {
                (None, _) => false,
                (Some(Reverse(s)), Limit::Time(t)) => s.time <= t,
                (Some(_), Limit::Drained) => true,
            };
            if !due {
                if let Limit::Time(t) = limit {
                    self.now = self.now.max(t);
                }
                return None;
            }
            let Reverse(next) = self.queue.pop().expect("peeked");
            self.now = self.now.max(next.time);
            match next.event {
                Event::Deliver(env) => {
                    let online = self.is_online(env.dst);
                    let is_reply_to_self = env
                        .request
                        .is_some_and(|r| self.pending_requests.get(&r) == Some(&env.dst));
                    let outcome = if online { Outcome::Delivered } else { Outcome::Unreachable };
                    self.trace.push(TraceRecord {
                        time: self.now,
                        src: env.src,
                        dst: env.dst,
                        topic: env.topic.clone(),
                        kind: env.kind(),
                        bytes: env.payload.len(),
                        outcome,
                    });
                    let bytes = env.payload.len() as u64;
                    if !online {
                        self.ledger.entry_mut(env.round, env.src).messages_dropped += 1;
                        continue;
                    }
                    {
                        let e = self.ledger.entry_mut(env.round, env.dst);
                        e.bytes_received += bytes;
                        e.received_by_kind[usize::from(env.kind() & 0x0f)] += bytes;
                    }
                    if is_reply_to_self {
                        if let Some(r) = env.request {
                            self.pending_requests.remove(&r);
                        }
                    }
                    return Some(Event::Deliver(env));
                }
                Event::Timeout { agent, request } => {
                    if self.pending_requests.remove(&request).is_some() && self.is_online(agent) {
                        return Some(Event::Timeout { agent, request });
                    }
                }
                Event::Timer { agent, token } => {
                    if self.is_online(agent) {
                        return Some(Event::Timer { agent, token });
                    }
                }
            }
        }
    }

    /// Drives the event loop, handing each event to `handler`. Returns the
    /// events processed, in order.
    pub fn run_until<F>(&mut self, limit: Limit, mut handler: F) -> Vec<Event>
    where
        F: FnMut(&mut Simulator, &Event),
    {
        let mut processed = Vec::new();
        while let Some(event) = self.next_event(limit) {
            handler(self, &event);
            processed.push(event);
        }
        processed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> NetConfig {
        NetConfig {
            latency_mean_ms: 0.0,
            latency_jitter_ms: 0.0,
            ..NetConfig::default()
        }
    }

    #[test]
    fn publish_fans_out_excluding_sender() {
        let mut sim = Simulator::new(quiet()).unwrap();
        for a in 1..=4 {
            sim.subscribe(AgentId(a), "membership");
        }
        assert_eq!(sim.publish("membership", &[1, 2, 3], AgentId(1)), 3);
        let events = sim.run_until(Limit::Drained, |_, _| {});
        assert_eq!(events.len(), 3);
        assert_eq!(sim.publish("nobody", &[1], AgentId(1)), 0);
        assert_eq!(sim.ledger().round_totals(0).bytes_sent, 9);
    }

    #[test]
    fn equal_time_events_keep_enqueue_order() {
        let mut sim = Simulator::new(quiet()).unwrap();
        for i in 0..5u8 {
            sim.send(AgentId(2), vec![i], AgentId(1));
        }
        let order: Vec<u8> = sim
            .run_until(Limit::Drained, |_, _| {})
            .into_iter()
            .map(|e| match e {
                Event::Deliver(env) => env.payload[0],
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_queue_returns_immediately() {
        let mut sim = Simulator::new(quiet()).unwrap();
        assert!(sim.run_until(Limit::Drained, |_, _| {}).is_empty());
        assert!(sim.run_until(Limit::Time(5_000), |_, _| {}).is_empty());
        assert_eq!(sim.now(), 5_000);
    }

    #[test]
    fn offline_destination_times_out() {
        let mut sim = Simulator::new(quiet()).unwrap();
        sim.disconnect(AgentId(2));
        let id = sim.request(AgentId(2), vec![5], AgentId(1), 1_000);
        let events = sim.run_until(Limit::Drained, |_, _| {});
        assert_eq!(events, vec![Event::Timeout { agent: AgentId(1), request: id }]);
        assert_eq!(sim.ledger().entry(0, AgentId(2)).bytes_received, 0);
    }

    #[test]
    fn reply_cancels_timeout() {
        let mut sim = Simulator::new(quiet()).unwrap();
        let id = sim.request(AgentId(2), vec![5], AgentId(1), 1_000);
        let events = sim.run_until(Limit::Drained, |sim, ev| {
            if let Event::Deliver(env) = ev {
                if env.dst == AgentId(2) {
                    sim.reply(env.request.unwrap(), env.src, vec![6], AgentId(2));
                }
            }
        });
        assert_eq!(events.len(), 2);
        assert!(events.iter().all(|e| !matches!(e, Event::Timeout { .. })));
        assert!(matches!(&events[1], Event::Deliver(env) if env.request == Some(id)));
    }

    #[test]
    fn snapshot_requires_closed_round() {
        let mut sim = Simulator::new(quiet()).unwrap();
        assert_eq!(sim.ledger_snapshot(0), Err(NetError::RoundOpen(0)));
        sim.begin_round(1);
        assert!(sim.ledger_snapshot(0).unwrap().is_empty());
        assert!(sim.ledger_snapshot(1).is_err());
    }

    #[test]
    fn dropped_messages_are_charged_to_sender_only() {
        let cfg = NetConfig {
            drop_prob: 0.5,
            seed: 3,
            ..quiet()
        };
        let mut sim = Simulator::new(cfg).unwrap();
        for _ in 0..100 {
            sim.send(AgentId(2), vec![0; 10], AgentId(1));
        }
        sim.run_until(Limit::Drained, |_, _| {});
        let s = sim.ledger().entry(0, AgentId(1));
        let r = sim.ledger().entry(0, AgentId(2));
        assert_eq!(s.bytes_sent, 1000);
        assert_eq!(r.bytes_received, 10 * (100 - s.messages_dropped));
        assert!(s.messages_dropped > 0);
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig { drop_prob: 1.0, ..quiet() }.validate().is_err());
        assert!(NetConfig { latency_mean_ms: -1.0, ..quiet() }.validate().is_err());
        let d = Disconnect { agent: AgentId(1), from_round: 3, to_round: 2, memory: MemoryMode::WithMemory };
        assert!(NetConfig { disconnects: vec![d], ..quiet() }.validate().is_err());
    }

    #[test]
    fn blob_store_is_content_addressed() {
        let mut store = BlobStore::default();
        let h = store.put(vec![1, 2, 3]);
        assert_eq!(store.put(vec![1, 2, 3]), h);
        assert_eq!(store.get(&h), Some(&[1u8, 2, 3][..]));
        assert_eq!(store.len(), 1);
    }
}
