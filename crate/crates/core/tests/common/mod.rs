//! Reference computations shared by the integration tests.
#![allow(dead_code)]

use ipls_core::model::{assemble, loss_and_gradient, slice, DatasetShard, FlatWeights, ModelSpec};
use ipls_core::AgentId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean softmax cross-entropy written out layer by layer with no shared code.
pub fn reference_loss(layers: &[usize], w: &[f64], data: &DatasetShard) -> f64 {
    let mut total = 0.0;
    for (x, y) in data.iter() {
        let mut a = x.to_vec();
        let mut offset = 0;
        for l in 0..layers.len() - 1 {
            let (n_in, n_out) = (layers[l], layers[l + 1]);
            let mut z = vec![0.0; n_out];
            for (j, zj) in z.iter_mut().enumerate() {
                for i in 0..n_in {
                    *zj += w[offset + j * n_in + i] * a[i];
                }
            }
            offset += n_in * n_out;
            let hidden = l + 2 < layers.len();
            a = if hidden { z.iter().map(|v| v.max(0.0)).collect() } else { z };
        }
        let m = a.iter().cloned().fold(f64::MIN, f64::max);
        let log_norm = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += log_norm - a[y as usize];
    }
    total / data.len() as f64
}

pub fn random_problem(seed: u64) -> (ModelSpec, FlatWeights, DatasetShard) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let mut layers = vec![rng.random_range(2..=6)];
    for _ in 1..depth {
        layers.push(rng.random_range(2..=7));
    }
    layers.push(rng.random_range(2..=5));
    let spec = ModelSpec::new(layers.clone(), seed).unwrap();
    let w: FlatWeights = (0..spec.param_count())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect::<Vec<f64>>()
        .into();
    let mut data = DatasetShard::new(AgentId(1), layers[0]);
    for _ in 0..rng.random_range(1..=6) {
        let mut x: Vec<f64> = (0..layers[0] - 1).map(|_| rng.random_range(-2.0..2.0)).collect();
        x.push(1.0);
        data.push(&x, rng.random_range(0..*layers.last().unwrap() as u32));
    }
    (spec, w, data)
}

/// Largest relative error between the analytic gradient and central finite
/// differences, measured per component against the gradient's scale.
pub fn gradient_error(seed: u64) -> f64 {
    let (spec, w, data) = random_problem(seed);
    let (_, grad) = loss_and_gradient(&spec, &w, &data).unwrap();
    let h = 1e-6;
    let scale = grad.as_slice().iter().map(|g| g.abs()).fold(1e-3, f64::max);
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let mut plus = w.as_slice().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (reference_loss(spec.layer_sizes(), &plus, &data)
            - reference_loss(spec.layer_sizes(), &minus, &data))
            / (2.0 * h);
        let g = grad.as_slice()[i];
        worst = worst.max((g - fd).abs() / scale.max(g.abs()));
    }
    worst
}

/// Slices a random vector into a random number of partitions, shuffles the
/// pieces and reassembles them.
pub fn slice_round_trip(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(1..=500);
    let k = rng.random_range(1..=len.min(40));
    let w: FlatWeights = (0..len)
        .map(|_| rng.random_range(-1e3..1e3))
        .collect::<Vec<f64>>()
        .into();
    let mut parts = slice(&w, k).unwrap();
    for i in (1..parts.len()).rev() {
        parts.swap(i, rng.random_range(0..=i));
    }
    let back = assemble(&parts, len).unwrap();
    back.as_slice()
        .iter()
        .zip(w.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits())
}

/// Writes small 28x28 IDX files under the standard MNIST names. Each class
/// lights up its own band of rows on top of uniform noise.
pub fn write_mnist_fixture(dir: &std::path::Path, train: usize, test: usize, seed: u64) {
    use ipls_core::idx::{encode_images, encode_labels};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| {
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let images: Vec<Vec<u8>> = labels
            .iter()
            .map(|&c| {
                (0..28 * 28)
                    .map(|p| {
                        let row = p / 28;
                        let base: u8 = if row / 2 == usize::from(c) + 2 { 180 } else { 0 };
                        base.saturating_add(rng.random_range(0..70))
                    })
                    .collect()
            })
            .collect();
        (encode_images(28, 28, &images), encode_labels(&labels))
    };
    let (ti, tl) = make(train);
    let (ei, el) = make(test);
    for (name, bytes) in [
        ("train-images-idx3-ubyte", ti),
        ("train-labels-idx1-ubyte", tl),
        ("t10k-images-idx3-ubyte", ei),
        ("t10k-labels-idx1-ubyte", el),
    ] {
        std::fs::write(dir.join(name), bytes).unwrap();
    }
}

/// Overrides that shrink the MNIST preset to fixture size.
pub const MNIST_FIXTURE_OVERRIDES: &str = "dataset.subsample = 400
model.hidden = 16
rounds = 3
train.local_iterations = 2";
