use ipls_core::netsim::{Disconnect, Event, Limit, MemoryMode, NetConfig, Outcome, Simulator};
use ipls_core::AgentId;

fn cfg(drop_prob: f64, seed: u64) -> NetConfig {
    NetConfig {
        drop_prob,
        seed,
        ..NetConfig::default()
    }
}

#[test]
fn drop_rate_is_binomial() {
    let p = 0.3;
    let n = 10_000;
    let mut sim = Simulator::new(cfg(p, 11)).unwrap();
    sim.subscribe(AgentId(2), "t");
    for _ in 0..n {
        sim.publish("t", &[1], AgentId(1));
    }
    let delivered = sim.run_until(Limit::Drained, |_, _| {}).len() as f64;
    let expected = n as f64 * (1.0 - p);
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((delivered - expected).abs() <= 3.0 * sigma, "{delivered} vs {expected}");
}

#[test]
fn fifo_per_pair_without_jitter() {
    let mut sim = Simulator::new(NetConfig {
        latency_jitter_ms: 0.0,
        ..cfg(0.0, 1)
    })
    .unwrap();
    for i in 0..20u8 {
        sim.send(AgentId(2), vec![7, i], AgentId(1));
    }
    let order: Vec<u8> = sim
        .run_until(Limit::Drained, |_, _| {})
        .into_iter()
        .filter_map(|e| match e {
            Event::Deliver(env) => Some(env.payload[1]),
            _ => None,
        })
        .collect();
    assert_eq!(order, (0..20).collect::<Vec<_>>());
}

fn traffic(seed: u64) -> String {
    let mut sim = Simulator::new(NetConfig {
        latency_mean_ms: 50.0,
        latency_jitter_ms: 40.0,
        ..cfg(0.25, seed)
    })
    .unwrap();
    for a in 1..=5 {
        sim.subscribe(AgentId(a), "x");
    }
    for round in 0..4 {
        sim.begin_round(round);
        for a in 1..=5 {
            sim.publish("x", &vec![3; a as usize * 10], AgentId(a));
            sim.send(AgentId(a % 5 + 1), vec![5; 30], AgentId(a));
        }
        sim.run_until(Limit::Time(sim.now() + 60_000), |_, _| {});
    }
    sim.trace_lines()
}

#[test]
fn traces_are_reproducible() {
    assert_eq!(traffic(3), traffic(3));
    assert_ne!(traffic(3), traffic(4));
    let line = traffic(3).lines().next().unwrap().to_string();
    assert_eq!(line.split(' ').count(), 7, "{line}");
}

#[test]
fn received_never_exceeds_sent() {
    for drop in [0.0, 0.4] {
        let mut sim = Simulator::new(cfg(drop, 9)).unwrap();
        for a in 1..=4 {
            sim.subscribe(AgentId(a), "x");
        }
        sim.begin_round(1);
        for a in 1..=4 {
            sim.publish("x", &[9; 100], AgentId(a));
        }
        sim.run_until(Limit::Drained, |_, _| {});
        sim.close_round();
        let totals = sim.ledger().round_totals(1);
        assert!(totals.bytes_received <= totals.bytes_sent);
        assert_eq!(totals.bytes_received == totals.bytes_sent, drop == 0.0);
        assert_eq!(sim.ledger_snapshot(1).unwrap().len(), 4);
    }
}

#[test]
fn offline_agents_are_silent() {
    let mut sim = Simulator::new(NetConfig {
        disconnects: vec![Disconnect {
            agent: AgentId(2),
            from_round: 1,
            to_round: 1,
            memory: MemoryMode::WithMemory,
        }],
        ..cfg(0.0, 1)
    })
    .unwrap();
    sim.begin_round(1);
    sim.disconnect(AgentId(2));
    assert!(!sim.send(AgentId(1), vec![1], AgentId(2)));
    sim.send(AgentId(2), vec![1, 2, 3], AgentId(1));
    assert!(sim.run_until(Limit::Drained, |_, _| {}).is_empty());
    assert_eq!(sim.trace()[0].outcome, Outcome::Unreachable);
    assert_eq!(sim.ledger().entry(1, AgentId(2)).bytes_sent, 0);
    assert_eq!(sim.ledger().entry(1, AgentId(2)).bytes_received, 0);
    sim.reconnect(AgentId(2));
    assert!(sim.send(AgentId(1), vec![1], AgentId(2)));
}
