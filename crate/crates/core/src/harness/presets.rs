//! Named scenarios. Learning rate, batch size and local iterations are
//! calibration values, not taken from any published run.

use super::config::ScenarioConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    /// One metrics file per variant, named after `ScenarioConfig::name`.
    pub variants: Vec<ScenarioConfig>,
}

/// Desk-scale stand-in for an MNIST subsample: 10 classes, 6000 training
/// samples, 1500 held out.
const SYNTHETIC_10: &str = "
dataset.kind = synthetic
dataset.classes = 10
dataset.samples = 7500
dataset.dimension = 33
dataset.separation = 0.6
eval_fraction = 0.2
model.hidden = 32
train.learning_rate = 0.05
train.batch_size = 32
train.local_iterations = 4
rounds = 40
";

const ORACLE_4: &str = "
agents = 4
partitions = 4
pi = 1
rho = 1
epsilon = inverse-r
sync_mode = synchronous
rounds = 20
dataset.kind = synthetic
dataset.classes = 3
dataset.samples = 1200
dataset.dimension = 11
dataset.separation = 1.0
eval_fraction = 0.2
model.hidden = 16
train.learning_rate = 0.05
train.batch_size = 16
train.local_iterations = 5
baseline = true
";

fn build(name: &str, layers: &[&str]) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    for text in layers {
        cfg.apply_text(text).expect("preset text is valid");
    }
    cfg.name = name.to_string();
    cfg
}

pub fn presets() -> Vec<Preset> {
    vec![
        Preset {
            name: "oracle-4",
            description: "4 agents, one partition each, 1/r weights: must match the central reference",
            variants: vec![build("oracle-4", &[ORACLE_4])],
        },
        Preset {
            name: "parity-10",
            description: "10 agents, rho=1, perfect network, synchronous, with central reference",
            variants: vec![build(
                "parity-10",
                &[
                    SYNTHETIC_10,
                    "agents = 10\npartitions = 10\npi = 1\nrho = 1\nsync_mode = synchronous\nbaseline = true",
                ],
            )],
        },
        Preset {
            name: "convergence-10",
            description: "10 agents, rho=2, perfect network, asynchronous, with central reference",
            variants: vec![build(
                "convergence-10",
                &[
                    SYNTHETIC_10,
                    "agents = 10\npartitions = 10\npi = 2\nrho = 2\nsync_mode = asynchronous\nbaseline = true",
                ],
            )],
        },
        Preset {
            name: "replica-8",
            description: "8 agents, rho=4, perfect network, synchronous",
            variants: vec![build(
                "replica-8",
                &[
                    SYNTHETIC_10,
                    "agents = 8\npartitions = 4\npi = 2\nrho = 4\nsync_mode = synchronous\nrounds = 20",
                ],
            )],
        },
        Preset {
            name: "rho-compare",
            description: "8 agents: rho=1 perfect, rho=4 perfect, rho=4 with loss and late messages",
            variants: {
                let base = [SYNTHETIC_10, "agents = 8\npartitions = 8\nsync_mode = asynchronous"];
                let rho1 = "pi = 1\nrho = 1";
                let rho4 = "pi = 4\nrho = 4";
                // Latency uniform on [0, 1111.1] ms: 10% exceed the 1000 ms timeout.
                let lossy = "net.drop_prob = 0.2\nnet.latency_mean_ms = 555.556\nnet.latency_jitter_ms = 555.556\nround_timeout_ms = 1000";
                vec![
                    build("rho1-perfect", &[base[0], base[1], rho1]),
                    build("rho4-perfect", &[base[0], base[1], rho4]),
                    build("rho4-imperfect", &[base[0], base[1], rho4, lossy]),
                ]
            },
        },
        Preset {
            name: "churn",
            description: "8 agents, rho=2, agents 5-8 offline in rounds 10-15, with and without memory",
            variants: {
                let base = [
                    SYNTHETIC_10,
                    "agents = 8\npartitions = 8\npi = 2\nrho = 2\nsync_mode = asynchronous",
                ];
                vec![
                    build("fault-free", &base),
                    build(
                        "with-memory",
                        &[base[0], base[1], "net.disconnect = 5:10-15:memory;6:10-15:memory;7:10-15:memory;8:10-15:memory"],
                    ),
                    build(
                        "memoryless",
                        &[
                            base[0],
                            base[1],
                            "net.disconnect = 5:10-15:memoryless;6:10-15:memoryless;7:10-15:memoryless;8:10-15:memoryless",
                        ],
                    ),
                ]
            },
        },
        Preset {
            name: "participation",
            description: "one dataset split among 2, 5 and 10 agents, one local epoch per round",
            variants: [2, 5, 10]
                .into_iter()
                .map(|n| {
                    build(
                        &format!("agents-{n}"),
                        &[
                            SYNTHETIC_10,
                            &format!(
                                "agents = {n}\npartitions = 10\npi = 1\nrho = 1\nsync_mode = synchronous\ntrain.local_iterations = epoch\ntrain.learning_rate = 0.01"
                            ),
                        ],
                    )
                })
                .collect(),
        },
        Preset {
            name: "mnist-10",
            description: "10 agents on a 6000-sample MNIST subsample, 785x500x100x10, rho=2; needs the IDX files",
            variants: vec![build(
                "mnist-10",
                &[
                    "dataset.kind = idx
dataset.images = train-images-idx3-ubyte
dataset.labels = train-labels-idx1-ubyte
dataset.eval_images = t10k-images-idx3-ubyte
dataset.eval_labels = t10k-labels-idx1-ubyte
dataset.subsample = 6000
model.hidden = 500,100
agents = 10
partitions = 10
pi = 2
rho = 2
rounds = 40
sync_mode = asynchronous
train.learning_rate = 0.05
train.batch_size = 32
train.local_iterations = 10
baseline = true",
                ],
            )],
        },
    ]
}

pub fn preset(name: &str) -> Option<Preset> {
    presets().into_iter().find(|p| p.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for p in presets() {
            assert!(!p.variants.is_empty());
            for v in &p.variants {
                v.validate().unwrap_or_else(|e| panic!("{}: {e}", v.name));
            }
        }
    }

    #[test]
    fn imperfect_latency_exceeds_timeout_one_time_in_ten() {
        let p = preset("rho-compare").unwrap();
        let v = &p.variants[2];
        let hi = v.latency_mean_ms + v.latency_jitter_ms;
        let lo = (v.latency_mean_ms - v.latency_jitter_ms).max(0.0);
        let late = (hi - v.round_timeout_ms) / (hi - lo);
        assert!((late - 0.1).abs() < 1e-4);
        assert_eq!(v.drop_prob, 0.2);
    }
}
