//! Partition-to-holder registry.
//!
//! Every storing agent holds at least `pi` partitions and no partition is
//! replicated on more than `rho` agents. The table is a plain value: every
//! agent applies the same operations in the same order and ends up with the
//! same table.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::{AgentId, PartitionId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("agent {0} already joined")]
    DuplicateJoin(AgentId),
    #[error("unknown partition {0}")]
    UnknownPartition(PartitionId),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("no successor for partitions held by agent {0}")]
    NoSuccessor(AgentId),
    #[error("malformed table text: {0}")]
    Parse(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionTable {
    k: u32,
    pi: u32,
    rho: u32,
    holders: BTreeMap<PartitionId, BTreeSet<AgentId>>,
    held: BTreeMap<AgentId, BTreeSet<PartitionId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub partition: PartitionId,
    pub donor: AgentId,
    /// `true` when the donor gave the partition up, `false` when both hold it.
    pub relinquished: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct JoinResult {
    pub assigned: BTreeSet<PartitionId>,
    pub transfers: Vec<Transfer>,
}

impl JoinResult {
    pub fn is_trainer_only(&self) -> bool {
        self.assigned.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reassignment {
    pub partition: PartitionId,
    pub from: AgentId,
    pub to: AgentId,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HandoffPlan {
    pub leaver: Option<AgentId>,
    pub reassignments: Vec<Reassignment>,
}

impl PartitionTable {
    /// The initiator starts out holding every partition.
    pub fn bootstrap(k: u32, pi: u32, rho: u32, initiator: AgentId) -> Result<Self, PartitionError> {
        if k == 0 || pi == 0 || pi > k || rho == 0 {
            return Err(PartitionError::InvalidParameters(format!(
                "need 1 <= pi <= K and rho >= 1, got K={k} pi={pi} rho={rho}"
            )));
        }
        let all: BTreeSet<PartitionId> = (1..=k).map(PartitionId).collect();
        let holders = all
            .iter()
            .map(|&p| (p, BTreeSet::from([initiator])))
            .collect();
        Ok(Self {
            k,
            pi,
            rho,
            holders,
            held: BTreeMap::from([(initiator, all)]),
        })
    }

    pub fn partition_count(&self) -> u32 {
        self.k
    }

    pub fn pi(&self) -> u32 {
        self.pi
    }

    pub fn rho(&self) -> u32 {
        self.rho
    }

    pub fn partitions(&self) -> impl Iterator<Item = PartitionId> {
        (1..=self.k).map(PartitionId)
    }

    /// Agents holding at least one partition, ascending.
    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.held.keys().copied()
    }

    pub fn contains_agent(&self, agent: AgentId) -> bool {
        self.held.contains_key(&agent)
    }

    pub fn held_by(&self, agent: AgentId) -> BTreeSet<PartitionId> {
        self.held.get(&agent).cloned().unwrap_or_default()
    }

    pub fn load(&self, agent: AgentId) -> usize {
        self.held.get(&agent).map_or(0, BTreeSet::len)
    }

    pub fn replication(&self, partition: PartitionId) -> usize {
        self.holders.get(&partition).map_or(0, BTreeSet::len)
    }

    /// Holders of a partition in ascending agent-ID order.
    pub fn lookup(&self, partition: PartitionId) -> Result<Vec<AgentId>, PartitionError> {
        self.holders
            .get(&partition)
            .map(|set| set.iter().copied().collect())
            .ok_or(PartitionError::UnknownPartition(partition))
    }

    fn add(&mut self, agent: AgentId, partition: PartitionId) {
        self.holders.entry(partition).or_default().insert(agent);
        self.held.entry(agent).or_default().insert(partition);
    }

    fn remove(&mut self, agent: AgentId, partition: PartitionId) {
        if let Some(set) = self.holders.get_mut(&partition) {
            set.remove(&agent);
        }
        if let Some(set) = self.held.get_mut(&agent) {
            set.remove(&partition);
            if set.is_empty() {
                self.held.remove(&agent);
            }
        }
    }

    /// Holder with the largest load, lowest ID among equals.
    fn donor_for(&self, partition: PartitionId) -> Option<(AgentId, usize)> {
        self.holders
            .get(&partition)?
            .iter()
            .map(|&a| (a, self.load(a)))
            .max_by_key(|&(a, load)| (load, Reverse(a)))
    }

    /// Admits a newcomer, handing it `pi` partitions when possible.
    ///
    /// Each pick takes the partition with the lowest replication, then the
    /// most loaded donor, then the highest ID. The donor gives the partition
    /// up when it can stay at or above `pi`, otherwise the newcomer co-holds
    /// it (bounded by `rho`). When fewer than `pi` partitions are obtainable
    /// the table is left untouched and the newcomer becomes trainer-only.
    pub fn join(&mut self, newcomer: AgentId) -> Result<JoinResult, PartitionError> {
        if self.held.contains_key(&newcomer) {
            return Err(PartitionError::DuplicateJoin(newcomer));
        }
        let pi = self.pi as usize;
        let rho = self.rho as usize;
        let mut work = self.clone();
        let mut result = JoinResult::default();

        while result.assigned.len() < pi {
            let pick = work
                .partitions()
                .filter(|p| !result.assigned.contains(p))
                .filter_map(|p| {
                    let (donor, donor_load) = work.donor_for(p)?;
                    let replication = work.replication(p);
                    let obtainable = donor_load > pi || replication < rho;
                    obtainable.then_some((p, donor, donor_load, replication))
                })
                .max_by_key(|&(p, _, donor_load, replication)| (Reverse(replication), donor_load, p));
            let Some((partition, donor, donor_load, _)) = pick else {
                break;
            };
            let relinquished = donor_load > pi;
            if relinquished {
                work.remove(donor, partition);
            }
            work.add(newcomer, partition);
            result.assigned.insert(partition);
            result.transfers.push(Transfer {
                partition,
                donor,
                relinquished,
            });
        }

        if result.assigned.len() < pi {
            return Ok(JoinResult::default());
        }
        *self = work;
        Ok(result)
    }

    /// Like [`join`](Self::join), but a storage offer smaller than `pi`
    /// partitions makes the newcomer trainer-only without touching the table.
    pub fn join_with_storage(
        &mut self,
        newcomer: AgentId,
        offered_bytes: u64,
        partition_bytes: u64,
    ) -> Result<JoinResult, PartitionError> {
        if self.held.contains_key(&newcomer) {
            return Err(PartitionError::DuplicateJoin(newcomer));
        }
        if offered_bytes < partition_bytes.saturating_mul(u64::from(self.pi)) {
            return Ok(JoinResult::default());
        }
        self.join(newcomer)
    }

    /// Plans the departure of `leaver`: partitions it holds alone go to the
    /// least-loaded remaining holder (lowest ID on ties); co-held ones are
    /// dropped.
    pub fn plan_leave(&self, leaver: AgentId) -> Result<HandoffPlan, PartitionError> {
        let Some(own) = self.held.get(&leaver) else {
            return Err(PartitionError::UnknownAgent(leaver));
        };
        let mut loads: BTreeMap<AgentId, usize> = self
            .held
            .iter()
            .filter(|(&a, _)| a != leaver)
            .map(|(&a, set)| (a, set.len()))
            .collect();
        let mut plan = HandoffPlan {
            leaver: Some(leaver),
            reassignments: Vec::new(),
        };
        for &partition in own {
            if self.replication(partition) > 1 {
                continue;
            }
            let (&to, _) = loads
                .iter()
                .min_by_key(|(&a, &load)| (load, a))
                .ok_or(PartitionError::NoSuccessor(leaver))?;
            *loads.get_mut(&to).expect("present") += 1;
            plan.reassignments.push(Reassignment {
                partition,
                from: leaver,
                to,
            });
        }
        Ok(plan)
    }

    /// Applies a plan produced by [`plan_leave`](Self::plan_leave).
    pub fn apply_leave(&mut self, plan: &HandoffPlan) -> Result<(), PartitionError> {
        let leaver = plan
            .leaver
            .ok_or_else(|| PartitionError::InvalidParameters("plan without leaver".into()))?;
        let own = self
            .held
            .get(&leaver)
            .cloned()
            .ok_or(PartitionError::UnknownAgent(leaver))?;
        for r in &plan.reassignments {
            self.add(r.to, r.partition);
        }
        for p in own {
            self.remove(leaver, p);
        }
        self.validate()
    }

    /// Checks every structural invariant of the table.
    pub fn validate(&self) -> Result<(), PartitionError> {
        let fail = |msg: String| Err(PartitionError::Invariant(msg));
        let pi = self.pi as usize;
        let rho = self.rho as usize;
        for p in self.partitions() {
            let n = self.replication(p);
            if n == 0 || n > rho {
                return fail(format!("partition {p} has {n} holders"));
            }
            for a in &self.holders[&p] {
                if !self.held.get(a).is_some_and(|s| s.contains(&p)) {
                    return fail(format!("holders[{p}] lists {a} but held[{a}] does not"));
                }
            }
        }
        if self.holders.len() != self.k as usize {
            return fail("holder map has unknown partitions".into());
        }
        let bootstrap = self.held.len() == 1;
        for (a, set) in &self.held {
            if set.is_empty() {
                return fail(format!("agent {a} listed with no partitions"));
            }
            if set.len() < pi && !bootstrap {
                return fail(format!("agent {a} holds {} < pi", set.len()));
            }
            for p in set {
                if !self.holders.get(p).is_some_and(|h| h.contains(a)) {
                    return fail(format!("held[{a}] lists {p} but holders[{p}] does not"));
                }
            }
        }
        Ok(())
    }

    /// Canonical, sorted text form used for logging and broadcast payloads.
    pub fn to_canonical_text(&self) -> String {
        let mut out = format!("partition-table k={} pi={} rho={}\n", self.k, self.pi, self.rho);
        for (agent, set) in &self.held {
            let ids: Vec<String> = set.iter().map(|p| p.0.to_string()).collect();
            let _ = writeln!(out, "agent {}: {}", agent.0, ids.join(" "));
        }
        out
    }
}

impl FromStr for PartitionTable {
    type Err = PartitionError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| PartitionError::Parse(m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("partition-table") {
            return Err(bad("missing header"));
        }
        let mut param = |name: &str| -> Result<u32, PartitionError> {
            fields
                .next()
                .and_then(|f| f.strip_prefix(name))
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(&format!("bad {name}")))
        };
        let (k, pi, rho) = (param("k")?, param("pi")?, param("rho")?);
        let mut table = Self {
            k,
            pi,
            rho,
            holders: BTreeMap::new(),
            held: BTreeMap::new(),
        };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let rest = line.strip_prefix("agent ").ok_or_else(|| bad(line))?;
            let (agent, parts) = rest.split_once(':').ok_or_else(|| bad(line))?;
            let agent = AgentId(agent.trim().parse().map_err(|_| bad(line))?);
            for p in parts.split_whitespace() {
                let p = PartitionId(p.parse().map_err(|_| bad(line))?);
                if p.0 == 0 || p.0 > k {
                    return Err(PartitionError::UnknownPartition(p));
                }
                table.add(agent, p);
            }
        }
        table.validate()?;
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> BTreeSet<PartitionId> {
        v.iter().copied().map(PartitionId).collect()
    }

    #[test]
    fn bootstrap_cases() {
        let t = PartitionTable::bootstrap(6, 4, 2, AgentId(1)).unwrap();
        assert_eq!(t.held_by(AgentId(1)), ids(&[1, 2, 3, 4, 5, 6]));
        let t = PartitionTable::bootstrap(1, 1, 1, AgentId(9)).unwrap();
        assert_eq!(t.held_by(AgentId(9)), ids(&[1]));
        assert!(PartitionTable::bootstrap(4, 5, 1, AgentId(1)).is_err());
        assert!(PartitionTable::bootstrap(4, 1, 0, AgentId(1)).is_err());
    }

    #[test]
    fn six_partition_walkthrough() {
        let mut t = PartitionTable::bootstrap(6, 4, 2, AgentId(1)).unwrap();
        let r2 = t.join(AgentId(2)).unwrap();
        assert_eq!(r2.assigned, ids(&[3, 4, 5, 6]));
        assert_eq!(t.held_by(AgentId(1)), ids(&[1, 2, 3, 4]));
        let moved: Vec<_> = r2.transfers.iter().map(|t| (t.partition.0, t.relinquished)).collect();
        assert_eq!(moved, vec![(6, true), (5, true), (4, false), (3, false)]);

        let r3 = t.join(AgentId(3)).unwrap();
        assert_eq!(r3.assigned, ids(&[1, 2, 5, 6]));
        assert!(t.partitions().all(|p| t.replication(p) == 2));
        assert_eq!(t.lookup(PartitionId(3)).unwrap(), vec![AgentId(1), AgentId(2)]);

        let before = t.clone();
        let r4 = t.join(AgentId(4)).unwrap();
        assert!(r4.is_trainer_only());
        assert_eq!(t, before);
        t.validate().unwrap();
    }

    #[test]
    fn single_replica_join_relinquishes() {
        let mut t = PartitionTable::bootstrap(4, 2, 1, AgentId(1)).unwrap();
        let r = t.join(AgentId(2)).unwrap();
        assert_eq!(r.assigned, ids(&[3, 4]));
        assert_eq!(t.held_by(AgentId(1)), ids(&[1, 2]));
        assert!(r.transfers.iter().all(|t| t.relinquished));
    }

    #[test]
    fn duplicate_join_and_lookup_errors() {
        let mut t = PartitionTable::bootstrap(3, 1, 2, AgentId(1)).unwrap();
        assert_eq!(t.join(AgentId(1)), Err(PartitionError::DuplicateJoin(AgentId(1))));
        assert_eq!(t.lookup(PartitionId(2)).unwrap(), vec![AgentId(1)]);
        assert!(t.lookup(PartitionId(4)).is_err());
    }

    #[test]
    fn storage_gate() {
        let mut t = PartitionTable::bootstrap(4, 2, 2, AgentId(1)).unwrap();
        assert!(t.join_with_storage(AgentId(2), 0, 80).unwrap().is_trainer_only());
        assert!(t.join_with_storage(AgentId(2), 159, 80).unwrap().is_trainer_only());
        assert_eq!(t.join_with_storage(AgentId(2), 160, 80).unwrap().assigned.len(), 2);
    }

    #[test]
    fn leave_plans() {
        let mut t = PartitionTable::bootstrap(6, 4, 2, AgentId(1)).unwrap();
        t.join(AgentId(2)).unwrap();
        t.join(AgentId(3)).unwrap();
        let plan = t.plan_leave(AgentId(2)).unwrap();
        assert!(plan.reassignments.is_empty());
        t.apply_leave(&plan).unwrap();
        for p in [3, 4, 5, 6] {
            assert_eq!(t.replication(PartitionId(p)), 1);
        }

        let solo = PartitionTable::bootstrap(3, 1, 1, AgentId(1)).unwrap();
        assert_eq!(solo.plan_leave(AgentId(1)), Err(PartitionError::NoSuccessor(AgentId(1))));
        assert_eq!(solo.plan_leave(AgentId(5)), Err(PartitionError::UnknownAgent(AgentId(5))));

        let mut t = PartitionTable::bootstrap(4, 2, 1, AgentId(1)).unwrap();
        t.join(AgentId(2)).unwrap();
        let plan = t.plan_leave(AgentId(2)).unwrap();
        let moves: Vec<_> = plan.reassignments.iter().map(|r| (r.partition.0, r.to)).collect();
        assert_eq!(moves, vec![(3, AgentId(1)), (4, AgentId(1))]);
        t.apply_leave(&plan).unwrap();
        assert_eq!(t.held_by(AgentId(1)), ids(&[1, 2, 3, 4]));
    }

    #[test]
    fn canonical_text_round_trip() {
        let mut t = PartitionTable::bootstrap(6, 4, 2, AgentId(1)).unwrap();
        t.join(AgentId(2)).unwrap();
        t.join(AgentId(3)).unwrap();
        let text = t.to_canonical_text();
        assert_eq!(
            text,
            "partition-table k=6 pi=4 rho=2\nagent 1: 1 2 3 4\nagent 2: 3 4 5 6\nagent 3: 1 2 5 6\n"
        );
        assert_eq!(text.parse::<PartitionTable>().unwrap(), t);
        assert!("partition-table k=2 pi=1 rho=1\nagent 1: 1\n".parse::<PartitionTable>().is_err());
    }
}
