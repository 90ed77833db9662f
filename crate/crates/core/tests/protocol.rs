use ipls_core::harness::{Prepared, ScenarioConfig};
use ipls_core::model::{init_weights, sgd_fit};
use ipls_core::netsim::MemoryMode;
use ipls_core::protocol::message::{kind, UPDATE_HEADER_BYTES};
use ipls_core::protocol::{Cluster, Status};
use ipls_core::{AgentId, PartitionId};

fn prepared(text: &str) -> Prepared {
    let base = "
dataset.kind = synthetic
dataset.classes = 3
dataset.samples = 240
dataset.dimension = 5
eval_fraction = 0.25
model.hidden = 6
train.batch_size = 8
train.local_iterations = 3
train.learning_rate = 0.1
";
    let mut cfg = ScenarioConfig::parse(base).unwrap();
    cfg.apply_text(text).unwrap();
    Prepared::new(&cfg, None).unwrap()
}

fn started(p: &Prepared) -> Cluster {
    let mut c = p.cluster().unwrap();
    c.initialize().unwrap();
    c
}

#[test]
fn lone_initiator_trains_solo() {
    let p = prepared("agents = 1\npartitions = 1\npi = 1\nrho = 1");
    let mut c = started(&p);
    let a = c.agent(AgentId(1)).unwrap();
    assert_eq!(a.status(), Status::Active);
    assert_eq!(a.held().len(), 1);
    c.run_round().unwrap();
    let local = sgd_fit(&p.spec, &init_weights(&p.spec), &p.shards[0], &p.params.fit_config(AgentId(1), 1)).unwrap();
    let global = c.global_model().unwrap();
    for (g, l) in global.as_slice().iter().zip(local.as_slice()) {
        assert!((g - l).abs() <= 1e-12 * (1.0 + l.abs()), "self-aggregation with eps = 1 is local SGD");
    }
    assert_eq!(c.sim().ledger().round_totals(1).bytes_sent, 0, "solo agent sends nothing");
}

#[test]
fn handshake_builds_the_same_table_everywhere() {
    let p = prepared("agents = 4\npartitions = 6\npi = 4\nrho = 2");
    let c = started(&p);
    let want = "partition-table k=6 pi=4 rho=2\nagent 1: 1 2 3 4\nagent 2: 3 4 5 6\nagent 3: 1 2 5 6\n";
    for a in c.agents() {
        assert_eq!(a.table().unwrap().to_canonical_text(), want, "agent {}", a.id());
        assert_eq!(a.status(), Status::Active);
    }
    assert!(c.agent(AgentId(4)).unwrap().is_trainer_only());
    for k in 1..=6 {
        let holders = c.holders(PartitionId(k));
        assert_eq!(holders.len(), 2, "partition {k}");
        for h in holders {
            assert!(c.sim().subscribers(&format!("partition-{k}")).contains(&h));
        }
    }
}

#[test]
fn zero_storage_makes_a_trainer_only_agent() {
    let p = prepared("agents = 3\npartitions = 3\npi = 1\nrho = 1\nstorage.zero = 3");
    let mut c = started(&p);
    let a3 = c.agent(AgentId(3)).unwrap();
    assert!(a3.is_trainer_only());
    assert!(!a3.table().unwrap().contains_agent(AgentId(3)));
    c.run_round().unwrap();
    let before = c.agent(AgentId(3)).unwrap().stats().updates_sent;
    c.run_round().unwrap();
    assert_eq!(c.agent(AgentId(3)).unwrap().stats().updates_sent - before, 3, "one update per partition");
}

#[test]
fn update_traffic_matches_the_partition_sizes() {
    let p = prepared("agents = 4\npartitions = 8\npi = 2\nrho = 1");
    let mut c = started(&p);
    c.run_round().unwrap();
    let layout = p.params.layout().unwrap();
    for a in c.agents() {
        let held = a.held();
        let expected: u64 = layout
            .ids()
            .filter(|k| !held.contains(k))
            .map(|k| (UPDATE_HEADER_BYTES + 8 * layout.len_of(k)) as u64)
            .sum();
        let sent = c.sim().ledger().entry(1, a.id()).sent_by_kind[kind::UPDATE as usize];
        assert_eq!(sent, expected, "agent {}", a.id());
    }
}

#[test]
fn two_agents_share_one_model_after_each_round() {
    let p = prepared("agents = 2\npartitions = 4\npi = 2\nrho = 1");
    let mut c = started(&p);
    for _ in 0..3 {
        c.run_round().unwrap();
        let m1 = c.agent(AgentId(1)).unwrap().load_model().unwrap();
        let m2 = c.agent(AgentId(2)).unwrap().load_model().unwrap();
        assert_eq!(m1, m2);
    }
}

#[test]
fn departure_hands_partitions_over() {
    let p = prepared("agents = 4\npartitions = 4\npi = 1\nrho = 1\nleave = 2@2");
    let mut c = started(&p);
    let owned = c.agent(AgentId(2)).unwrap().held();
    c.run_round().unwrap();
    let report = c.run_round().unwrap();
    assert!(report.events[&AgentId(2)].iter().any(|e| e.starts_with("leave")));
    assert_eq!(c.agent(AgentId(2)).unwrap().status(), Status::Departed);
    for k in owned {
        let holders = c.holders(k);
        assert_eq!(holders.len(), 1);
        assert!(!holders.contains(&AgentId(2)));
    }
    for a in c.agents().filter(|a| a.is_active()) {
        assert!(!a.table().unwrap().contains_agent(AgentId(2)));
    }
    for _ in 0..2 {
        c.run_round().unwrap();
    }
    assert!(c.global_model().unwrap().is_finite());
    assert!(c.sim().ledger().round_totals(4).bytes_sent > 0);
}

#[test]
fn last_agent_persists_and_stops() {
    let p = prepared("agents = 1\npartitions = 2\npi = 1\nrho = 1\nleave = 1@1");
    let mut c = started(&p);
    let report = c.run_round().unwrap();
    assert!(report.events[&AgentId(1)].contains(&"persisted".to_string()));
    assert!(!c.sim().blobs.is_empty());
    c.run_round().unwrap();
}

#[test]
fn memoryless_reconnect_restarts_epsilon() {
    let p = prepared("agents = 4\npartitions = 4\npi = 2\nrho = 2\nnet.disconnect = 4:2-3:memoryless");
    let mut c = started(&p);
    c.run_round().unwrap();
    let k = *c.agent(AgentId(4)).unwrap().held().iter().next().unwrap();
    assert!(c.agent(AgentId(4)).unwrap().epsilon(k).is_some());
    c.run_round().unwrap();
    c.run_round().unwrap();
    let r4 = c.run_round().unwrap();
    assert!(r4.events[&AgentId(4)].iter().any(|e| e == "reconnect:memoryless"));
    let a4 = c.agent(AgentId(4)).unwrap();
    // Reset, refreshed from the co-holder, then a first aggregation at 1/r.
    assert_eq!(a4.epsilon(k), Some(0.25));
    let co = c
        .holders(k)
        .into_iter()
        .find(|&h| h != AgentId(4))
        .expect("co-holder");
    let theirs = c.agent(co).unwrap().global_values(k).unwrap();
    let gap = a4
        .global_values(k)
        .unwrap()
        .iter()
        .zip(theirs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(gap < 0.05, "refresh restores near agreement, gap {gap}");
}

#[test]
fn with_memory_keeps_state_while_away() {
    let p = prepared("agents = 4\npartitions = 4\npi = 2\nrho = 2\nnet.disconnect = 3:2-2:memory");
    let mut c = started(&p);
    c.run_round().unwrap();
    let k = *c.agent(AgentId(3)).unwrap().held().iter().next().unwrap();
    let eps = c.agent(AgentId(3)).unwrap().epsilon(k);
    let r2 = c.run_round().unwrap();
    assert!(r2.offline.contains(&AgentId(3)));
    assert!(!r2.trained.contains(&AgentId(3)));
    assert_eq!(c.agent(AgentId(3)).unwrap().epsilon(k), eps, "untouched while offline");
    c.agent(AgentId(3)).unwrap();
    let r3 = c.run_round().unwrap();
    assert!(r3.trained.contains(&AgentId(3)));
    assert_eq!(MemoryMode::WithMemory.to_string(), "memory");
}

#[test]
fn heavy_loss_never_aborts_a_round() {
    let p = prepared(
        "agents = 5\npartitions = 5\npi = 2\nrho = 3\nsync_mode = asynchronous\nnet.drop_prob = 0.5\nnet.latency_mean_ms = 600\nnet.latency_jitter_ms = 600",
    );
    let mut c = started(&p);
    for _ in 0..8 {
        c.run_round().unwrap();
    }
    let init = c.agent(AgentId(1)).unwrap();
    assert_eq!(init.status(), Status::Active);
    assert!(init.load_model().unwrap().is_finite());
    assert!(c.global_model().unwrap().is_finite(), "no partition is orphaned");
}
