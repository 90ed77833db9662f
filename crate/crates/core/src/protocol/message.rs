//! Canonical binary encoding of protocol messages.
//!
//! Layout: one kind byte, then fields in declaration order. Integers are
//! big-endian `u32` (`u64` for seeds, storage offers and digests), reals are
//! big-endian IEEE-754 `f64`, sequences carry a `u32` length prefix.

use thiserror::Error;

use crate::{AgentId, PartitionId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated message: need {need} bytes at offset {at}")]
    Truncated { at: usize, need: usize },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("invalid utf-8 in text field")]
    Utf8,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

pub mod kind {
    pub const ANNOUNCE: u8 = 1;
    pub const JOIN_OFFER: u8 = 2;
    pub const TABLE: u8 = 3;
    pub const TABLE_REQUEST: u8 = 4;
    pub const FETCH: u8 = 5;
    pub const FETCH_REPLY: u8 = 6;
    pub const UPDATE: u8 = 7;
    pub const UPDATE_REPLY: u8 = 8;
    pub const REPLICA_SYNC: u8 = 9;
    pub const HANDOFF: u8 = 10;
    pub const TABLE_ACK: u8 = 11;
}

/// Bytes preceding the values in an update or reply message.
pub const UPDATE_HEADER_BYTES: usize = 17;

/// Training-process description broadcast by the initiator.
#[derive(Debug, Clone, PartialEq)]
pub struct Announce {
    pub initiator: AgentId,
    pub layer_sizes: Vec<u32>,
    pub model_seed: u64,
    pub partitions: u32,
    pub pi: u32,
    pub rho: u32,
    pub optimizer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchPurpose {
    Load = 0,
    Repair = 1,
    Refresh = 2,
}

impl FetchPurpose {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => Self::Repair,
            2 => Self::Refresh,
            _ => Self::Load,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMessage {
    pub sender: AgentId,
    pub round: u32,
    pub partition: PartitionId,
    pub delta: Vec<f64>,
}

/// Current global values of a partition; `round` is the last round the
/// responder aggregated.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplyMessage {
    pub responder: AgentId,
    pub round: u32,
    pub partition: PartitionId,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaSyncMessage {
    pub origin: AgentId,
    pub partition: PartitionId,
    pub round: u32,
    /// Digest of the origin's values before this round's aggregation.
    pub digest: u64,
    /// `(submitter, origin round)` of every delta folded into `sum`.
    pub submitters: Vec<(AgentId, u32)>,
    /// Sum of those deltas in ascending key order.
    pub sum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandoffEntry {
    pub partition: PartitionId,
    pub from: AgentId,
    pub to: AgentId,
    pub blob: [u8; 32],
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Announce(Announce),
    JoinOffer { agent: AgentId, storage: u64 },
    Table { version: u32, text: String },
    TableRequest { agent: AgentId },
    Fetch { requester: AgentId, round: u32, partition: PartitionId, purpose: FetchPurpose },
    FetchReply { reply: ReplyMessage, purpose: FetchPurpose },
    Update(UpdateMessage),
    UpdateReply(ReplyMessage),
    ReplicaSync(ReplicaSyncMessage),
    Handoff { leaver: AgentId, entries: Vec<HandoffEntry> },
    TableAck { agent: AgentId, version: u32 },
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn reals(&mut self, vs: &[f64]) {
        self.u32(vs.len() as u32);
        for v in vs {
            self.0.extend_from_slice(&v.to_be_bytes());
        }
    }
    fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn reply(&mut self, r: &ReplyMessage) {
        self.u32(r.responder.0);
        self.u32(r.round);
        self.u32(r.partition.0);
        self.reals(&r.values);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(WireError::Truncated { at: self.at, need: n })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_be_bytes(a))
    }
    fn reals(&mut self) -> Result<Vec<f64>, WireError> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or(WireError::Truncated { at: self.at, need: usize::MAX })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| {
                let mut a = [0u8; 8];
                a.copy_from_slice(c);
                f64::from_be_bytes(a)
            })
            .collect())
    }
    fn text(&mut self) -> Result<String, WireError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WireError::Utf8)
    }
    fn agent(&mut self) -> Result<AgentId, WireError> {
        self.u32().map(AgentId)
    }
    fn partition(&mut self) -> Result<PartitionId, WireError> {
        self.u32().map(PartitionId)
    }
    fn reply(&mut self) -> Result<ReplyMessage, WireError> {
        Ok(ReplyMessage {
            responder: self.agent()?,
            round: self.u32()?,
            partition: self.partition()?,
            values: self.reals()?,
        })
    }
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Self::Announce(_) => kind::ANNOUNCE,
            Self::JoinOffer { .. } => kind::JOIN_OFFER,
            Self::Table { .. } => kind::TABLE,
            Self::TableRequest { .. } => kind::TABLE_REQUEST,
            Self::Fetch { .. } => kind::FETCH,
            Self::FetchReply { .. } => kind::FETCH_REPLY,
            Self::Update(_) => kind::UPDATE,
            Self::UpdateReply(_) => kind::UPDATE_REPLY,
            Self::ReplicaSync(_) => kind::REPLICA_SYNC,
            Self::Handoff { .. } => kind::HANDOFF,
            Self::TableAck { .. } => kind::TABLE_ACK,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.u8(self.kind());
        match self {
            Self::Announce(a) => {
                w.u32(a.initiator.0);
                w.u32(a.layer_sizes.len() as u32);
                for &n in &a.layer_sizes {
                    w.u32(n);
                }
                w.u64(a.model_seed);
                w.u32(a.partitions);
                w.u32(a.pi);
                w.u32(a.rho);
                w.text(&a.optimizer);
            }
            Self::JoinOffer { agent, storage } => {
                w.u32(agent.0);
                w.u64(*storage);
            }
            Self::Table { version, text } => {
                w.u32(*version);
                w.text(text);
            }
            Self::TableRequest { agent } => w.u32(agent.0),
            Self::TableAck { agent, version } => {
                w.u32(agent.0);
                w.u32(*version);
            }
            Self::Fetch { requester, round, partition, purpose } => {
                w.u32(requester.0);
                w.u32(*round);
                w.u32(partition.0);
                w.u8(*purpose as u8);
            }
            Self::FetchReply { reply, purpose } => {
                w.reply(reply);
                w.u8(*purpose as u8);
            }
            Self::Update(u) => {
                w.u32(u.sender.0);
                w.u32(u.round);
                w.u32(u.partition.0);
                w.reals(&u.delta);
            }
            Self::UpdateReply(r) => w.reply(r),
            Self::ReplicaSync(s) => {
                w.u32(s.origin.0);
                w.u32(s.partition.0);
                w.u32(s.round);
                w.u64(s.digest);
                w.u32(s.submitters.len() as u32);
                for &(a, r) in &s.submitters {
                    w.u32(a.0);
                    w.u32(r);
                }
                w.reals(&s.sum);
            }
            Self::Handoff { leaver, entries } => {
                w.u32(leaver.0);
                w.u32(entries.len() as u32);
                for e in entries {
                    w.u32(e.partition.0);
                    w.u32(e.from.0);
                    w.u32(e.to.0);
                    w.0.extend_from_slice(&e.blob);
                    w.u32(e.version);
                }
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader { bytes, at: 0 };
        let msg = match r.u8()? {
            kind::ANNOUNCE => {
                let initiator = r.agent()?;
                let n = r.u32()? as usize;
                let layer_sizes = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
                Self::Announce(Announce {
                    initiator,
                    layer_sizes,
                    model_seed: r.u64()?,
                    partitions: r.u32()?,
                    pi: r.u32()?,
                    rho: r.u32()?,
                    optimizer: r.text()?,
                })
            }
            kind::JOIN_OFFER => Self::JoinOffer {
                agent: r.agent()?,
                storage: r.u64()?,
            },
            kind::TABLE => Self::Table {
                version: r.u32()?,
                text: r.text()?,
            },
            kind::TABLE_REQUEST => Self::TableRequest { agent: r.agent()? },
            kind::TABLE_ACK => Self::TableAck {
                agent: r.agent()?,
                version: r.u32()?,
            },
            kind::FETCH => Self::Fetch {
                requester: r.agent()?,
                round: r.u32()?,
                partition: r.partition()?,
                purpose: FetchPurpose::from_u8(r.u8()?),
            },
            kind::FETCH_REPLY => Self::FetchReply {
                reply: r.reply()?,
                purpose: FetchPurpose::from_u8(r.u8()?),
            },
            kind::UPDATE => Self::Update(UpdateMessage {
                sender: r.agent()?,
                round: r.u32()?,
                partition: r.partition()?,
                delta: r.reals()?,
            }),
            kind::UPDATE_REPLY => Self::UpdateReply(r.reply()?),
            kind::REPLICA_SYNC => {
                let origin = r.agent()?;
                let partition = r.partition()?;
                let round = r.u32()?;
                let digest = r.u64()?;
                let n = r.u32()? as usize;
                let mut submitters = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    submitters.push((r.agent()?, r.u32()?));
                }
                Self::ReplicaSync(ReplicaSyncMessage {
                    origin,
                    partition,
                    round,
                    digest,
                    submitters,
                    sum: r.reals()?,
                })
            }
            kind::HANDOFF => {
                let leaver = r.agent()?;
                let n = r.u32()? as usize;
                let mut entries = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let partition = r.partition()?;
                    let from = r.agent()?;
                    let to = r.agent()?;
                    let mut blob = [0u8; 32];
                    blob.copy_from_slice(r.take(32)?);
                    entries.push(HandoffEntry {
                        partition,
                        from,
                        to,
                        blob,
                        version: r.u32()?,
                    });
                }
                Self::Handoff { leaver, entries }
            }
            other => return Err(WireError::UnknownKind(other)),
        };
        if r.at != bytes.len() {
            return Err(WireError::Trailing(bytes.len() - r.at));
        }
        Ok(msg)
    }
}

/// Encodes raw partition values for the blob store.
pub fn encode_values(values: &[f64]) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(4 + values.len() * 8));
    w.reals(values);
    w.0
}

pub fn decode_values(bytes: &[u8]) -> Result<Vec<f64>, WireError> {
    let mut r = Reader { bytes, at: 0 };
    let values = r.reals()?;
    if r.at != bytes.len() {
        return Err(WireError::Trailing(bytes.len() - r.at));
    }
    Ok(values)
}
