//! Flat-vector multilayer perceptron.
//!
//! Weights of every layer live in one contiguous `f64` vector, layer by layer,
//! each layer stored as an `out x in` row-major matrix. There are no separate
//! bias vectors: inputs carry a constant-1 feature in their last position.
//! Hidden layers use ReLU, the output layer feeds a softmax cross-entropy loss.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::{AgentId, PartitionId};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty shard")]
    EmptyShard,
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("partition count {k} out of range for {len} weights")]
    PartitionCountOutOfRange { k: usize, len: usize },
    #[error("incomplete model: {0}")]
    Incomplete(String),
    #[error("overlap at offset {0}")]
    Overlap(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    SoftmaxCrossEntropy,
}

/// Layer sizes (input first, bias feature included) and the init seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    loss: LossKind,
    seed: u64,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Result<Self, ModelError> {
        if layer_sizes.len() < 2 {
            return Err(ModelError::InvalidSpec(
                "at least an input and an output layer are required".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(ModelError::InvalidSpec("layer sizes must be >= 1".into()));
        }
        Ok(Self {
            layer_sizes,
            loss: LossKind::SoftmaxCrossEntropy,
            seed,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    /// Total number of weights, `sum(n_l * n_{l+1})`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| p[0] * p[1]).sum()
    }

    /// `(offset, fan_in, fan_out)` for each weight matrix.
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|p| {
                let layer = (offset, p[0], p[1]);
                offset += p[0] * p[1];
                layer
            })
            .collect()
    }
}

/// The full parameter vector of a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatWeights(Vec<f64>);

impl FlatWeights {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for FlatWeights {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// A contiguous slice of the flat weight vector owned by one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SubVector {
    pub partition: PartitionId,
    pub offset: usize,
    pub values: Vec<f64>,
}

/// Contiguous split of `total` weights into `k` partitions: the first
/// `total % k` partitions get one extra element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionLayout {
    total: usize,
    k: usize,
}

impl PartitionLayout {
    pub fn new(total: usize, k: usize) -> Result<Self, ModelError> {
        if k == 0 || k > total {
            return Err(ModelError::PartitionCountOutOfRange { k, len: total });
        }
        Ok(Self { total, k })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn count(&self) -> usize {
        self.k
    }

    pub fn ids(&self) -> impl Iterator<Item = PartitionId> {
        (1..=self.k as u32).map(PartitionId)
    }

    /// Index range covered by a partition. Panics on an out-of-range ID.
    pub fn range(&self, id: PartitionId) -> Range<usize> {
        let idx = id.0 as usize;
        assert!(idx >= 1 && idx <= self.k, "partition {id} out of range");
        let i = idx - 1;
        let base = self.total / self.k;
        let extra = self.total % self.k;
        let start = i * base + i.min(extra);
        let len = base + usize::from(i < extra);
        start..start + len
    }

    pub fn len_of(&self, id: PartitionId) -> usize {
        self.range(id).len()
    }

    pub fn contains(&self, id: PartitionId) -> bool {
        id.0 >= 1 && id.0 as usize <= self.k
    }
}

/// Samples with a shared feature dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    pub owner: AgentId,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl DatasetShard {
    pub fn new(owner: AgentId, dim: usize) -> Self {
        Self {
            owner,
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, features: &[f64], label: u32) {
        assert_eq!(features.len(), self.dim, "feature dimension");
        self.features.extend_from_slice(features);
        self.labels.push(label);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&[f64], u32) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], u32)> + '_ {
        self.features
            .chunks_exact(self.dim.max(1))
            .zip(self.labels.iter().copied())
    }

    fn check_against(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        if self.dim != spec.input_dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "shard features have dimension {}, model expects {}",
                self.dim,
                spec.input_dim()
            )));
        }
        let classes = spec.num_classes() as u32;
        if let Some(bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(ModelError::DimensionMismatch(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_iterations: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::InvalidTrainConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidTrainConfig("batch_size must be >= 1".into()));
        }
        if self.local_iterations == 0 {
            return Err(ModelError::InvalidTrainConfig(
                "local_iterations must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_weights(spec: &ModelSpec, w: &FlatWeights) -> Result<(), ModelError> {
    if w.len() != spec.param_count() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} weights for a model with {} parameters",
            w.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

/// Glorot-uniform initialisation, deterministic in the spec seed.
pub fn init_weights(spec: &ModelSpec) -> FlatWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed());
    let mut values = Vec::with_capacity(spec.param_count());
    for (_, fan_in, fan_out) in spec.layers() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.random_range(-bound..=bound));
        }
    }
    FlatWeights(values)
}

/// Reusable activation buffers for one forward/backward pass.
struct Scratch {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Scratch {
    fn new(spec: &ModelSpec) -> Self {
        let widest = spec.layer_sizes().iter().copied().max().unwrap_or(0);
        Self {
            acts: spec.layer_sizes().iter().map(|&n| vec![0.0; n]).collect(),
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
        }
    }
}

/// Fills `scratch.acts`; the last entry holds the raw logits.
fn forward(spec: &ModelSpec, w: &[f64], x: &[f64], scratch: &mut Scratch) {
    let layers = spec.layers();
    let last = layers.len() - 1;
    scratch.acts[0].copy_from_slice(x);
    for (l, &(offset, fan_in, fan_out)) in layers.iter().enumerate() {
        let (head, tail) = scratch.acts.split_at_mut(l + 1);
        let input = &head[l];
        let output = &mut tail[0];
        for (j, out) in output.iter_mut().enumerate() {
            let row = &w[offset + j * fan_in..offset + (j + 1) * fan_in];
            let z: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum();
            *out = if l == last { z } else { z.max(0.0) };
        }
        debug_assert_eq!(output.len(), fan_out);
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn argmax_lowest(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Adds the per-sample gradient into `grad` and returns the sample loss.
fn backprop(
    spec: &ModelSpec,
    w: &[f64],
    x: &[f64],
    label: u32,
    grad: &mut [f64],
    scratch: &mut Scratch,
) -> f64 {
    forward(spec, w, x, scratch);
    let layers = spec.layers();
    let logits = scratch.acts.last().expect("output layer");
    let lse = log_sum_exp(logits);
    let loss = lse - logits[label as usize];

    let classes = logits.len();
    for (j, &z) in logits.iter().enumerate() {
        scratch.delta[j] = (z - lse).exp() - if j == label as usize { 1.0 } else { 0.0 };
    }
    let mut width = classes;

    for (l, &(offset, fan_in, _)) in layers.iter().enumerate().rev() {
        let input = &scratch.acts[l];
        for j in 0..width {
            let d = scratch.delta[j];
            if d == 0.0 {
                continue;
            }
            let row = &mut grad[offset + j * fan_in..offset + (j + 1) * fan_in];
            for (g, a) in row.iter_mut().zip(input) {
                *g += d * a;
            }
        }
        if l == 0 {
            break;
        }
        for i in 0..fan_in {
            scratch.delta_prev[i] = if input[i] > 0.0 {
                (0..width)
                    .map(|j| w[offset + j * fan_in + i] * scratch.delta[j])
                    .sum()
            } else {
                0.0
            };
        }
        std::mem::swap(&mut scratch.delta, &mut scratch.delta_prev);
        width = fan_in;
    }
    loss
}

/// Mean loss and mean gradient over the given sample indices.
fn batch_gradient(
    spec: &ModelSpec,
    w: &[f64],
    data: &DatasetShard,
    indices: &[usize],
    grad: &mut [f64],
    scratch: &mut Scratch,
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for &i in indices {
        let (x, y) = data.sample(i);
        loss += backprop(spec, w, x, y, grad, scratch);
    }
    let scale = 1.0 / indices.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    loss * scale
}

/// Mean loss and full-batch gradient over a shard.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    w: &FlatWeights,
    data: &DatasetShard,
) -> Result<(f64, FlatWeights), ModelError> {
    check_weights(spec, w)?;
    data.check_against(spec)?;
    if data.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    let mut grad = vec![0.0; w.len()];
    let mut scratch = Scratch::new(spec);
    let indices: Vec<usize> = (0..data.len()).collect();
    let loss = batch_gradient(spec, w.as_slice(), data, &indices, &mut grad, &mut scratch);
    Ok((loss, FlatWeights(grad)))
}

/// Mean cross-entropy and top-1 accuracy (ties go to the lowest class index).
pub fn evaluate(
    spec: &ModelSpec,
    w: &FlatWeights,
    data: &DatasetShard,
) -> Result<(f64, f64), ModelError> {
    check_weights(spec, w)?;
    data.check_against(spec)?;
    if data.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    let mut scratch = Scratch::new(spec);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, y) in data.iter() {
        forward(spec, w.as_slice(), x, &mut scratch);
        let logits = scratch.acts.last().expect("output layer");
        loss += log_sum_exp(logits) - logits[y as usize];
        if argmax_lowest(logits) == y as usize {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Runs `cfg.local_iterations` mini-batch SGD steps starting from `w`.
///
/// Batches walk a seeded Fisher-Yates permutation of the shard, reshuffled
/// whenever it is exhausted; a trailing partial batch is used as-is.
pub fn sgd_fit(
    spec: &ModelSpec,
    w: &FlatWeights,
    data: &DatasetShard,
    cfg: &TrainConfig,
) -> Result<FlatWeights, ModelError> {
    check_weights(spec, w)?;
    data.check_against(spec)?;
    if data.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    if cfg.batch_size == 0 || !cfg.learning_rate.is_finite() {
        return Err(ModelError::InvalidTrainConfig(
            "batch_size must be >= 1 and learning_rate finite".into(),
        ));
    }
    let mut out = w.clone();
    if cfg.local_iterations == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut grad = vec![0.0; w.len()];
    let mut scratch = Scratch::new(spec);
    for _ in 0..cfg.local_iterations {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        batch_gradient(
            spec,
            out.as_slice(),
            data,
            &order[cursor..end],
            &mut grad,
            &mut scratch,
        );
        cursor = end;
        for (v, g) in out.0.iter_mut().zip(&grad) {
            *v -= cfg.learning_rate * g;
        }
    }
    Ok(out)
}

/// Splits `w` into `k` contiguous sub-vectors in partition-ID order.
pub fn slice(w: &FlatWeights, k: usize) -> Result<Vec<SubVector>, ModelError> {
    let layout = PartitionLayout::new(w.len(), k)?;
    Ok(layout
        .ids()
        .map(|id| {
            let range = layout.range(id);
            SubVector {
                partition: id,
                offset: range.start,
                values: w.as_slice()[range].to_vec(),
            }
        })
        .collect())
}

/// Concatenates sub-vectors by offset; they must cover `[0, total)` exactly once.
pub fn assemble(parts: &[SubVector], total: usize) -> Result<FlatWeights, ModelError> {
    let mut ordered: Vec<&SubVector> = parts.iter().collect();
    ordered.sort_by_key(|p| (p.offset, p.partition));
    let mut out = Vec::with_capacity(total);
    for part in ordered {
        if part.offset < out.len() {
            return Err(ModelError::Overlap(part.offset));
        }
        if part.offset > out.len() {
            return Err(ModelError::Incomplete(format!(
                "gap at [{}, {})",
                out.len(),
                part.offset
            )));
        }
        out.extend_from_slice(&part.values);
    }
    if out.len() < total {
        return Err(ModelError::Incomplete(format!(
            "gap at [{}, {total})",
            out.len()
        )));
    }
    if out.len() > total {
        return Err(ModelError::Overlap(total));
    }
    Ok(FlatWeights(out))
}
