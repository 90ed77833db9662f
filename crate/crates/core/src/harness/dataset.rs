//! Dataset generation, loading and the stratified IID split.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{DatasetConfig, ScenarioConfig};
use super::HarnessError;
use crate::idx::{load_pair, IdxImages};
use crate::model::DatasetShard;
use crate::{derive_seed, AgentId};

/// Labelled samples with a shared feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub classes: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

/// Gaussian blobs: class means are drawn with standard deviation
/// `separation`, samples add unit noise. The last feature is a constant 1.
pub fn synthetic(classes: usize, samples: usize, dimension: usize, separation: f64, seed: u64) -> Samples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = dimension - 1;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..width)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    separation * z
                })
                .collect()
        })
        .collect();
    let mut features = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        let mut x: Vec<f64> = means[c]
            .iter()
            .map(|m| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                m + noise
            })
            .collect();
        x.push(1.0);
        features.push(x);
        labels.push(c as u32);
    }
    Samples {
        dim: dimension,
        classes,
        features,
        labels,
    }
}

fn from_idx(images: IdxImages, labels: Vec<u8>, classes: usize) -> Result<Samples, HarnessError> {
    if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= classes) {
        return Err(HarnessError::Data(format!("label {bad} outside [0, {classes})")));
    }
    Ok(Samples {
        dim: images.feature_dim(),
        classes,
        features: images.data,
        labels: labels.into_iter().map(u32::from).collect(),
    })
}

/// Stratified IID split. Per class, samples are shuffled, `eval_fraction` of
/// them are held out, and the rest are dealt round-robin to the agents with
/// the dealing position carried across classes. Shards are then trimmed to
/// equal size; everything left over joins the evaluation set.
pub fn split_iid(
    data: &Samples,
    agents: usize,
    eval_fraction: f64,
    seed: u64,
) -> (Vec<DatasetShard>, DatasetShard) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut eval_idx = Vec::new();
    let mut dealt: Vec<Vec<usize>> = vec![Vec::new(); agents];
    let mut next = 0usize;
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
        let held_out = (members.len() as f64 * eval_fraction).floor() as usize;
        eval_idx.extend_from_slice(&members[..held_out]);
        for &i in &members[held_out..] {
            dealt[next].push(i);
            next = (next + 1) % agents;
        }
    }
    let size = dealt.iter().map(Vec::len).min().unwrap_or(0);
    for d in dealt.iter_mut() {
        eval_idx.extend(d.drain(size..));
    }
    eval_idx.sort_unstable();
    let shards = dealt
        .iter()
        .enumerate()
        .map(|(a, idx)| {
            let mut s = DatasetShard::new(AgentId(a as u32 + 1), data.dim);
            for &i in idx {
                s.push(&data.features[i], data.labels[i]);
            }
            s
        })
        .collect();
    let mut eval = DatasetShard::new(AgentId(0), data.dim);
    for i in eval_idx {
        eval.push(&data.features[i], data.labels[i]);
    }
    (shards, eval)
}

fn resolve(path: &Path, data_dir: Option<&Path>) -> PathBuf {
    match data_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

/// Training shards (agent `i` gets index `i - 1`) and the evaluation shard.
pub fn load_dataset(
    cfg: &ScenarioConfig,
    data_dir: Option<&Path>,
) -> Result<(Vec<DatasetShard>, DatasetShard), HarnessError> {
    let seed = cfg.dataset_seed();
    let agents = cfg.agents as usize;
    let (shards, eval) = match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            samples,
            dimension,
            separation,
        } => {
            let data = synthetic(*classes, *samples, *dimension, *separation, seed);
            split_iid(&data, agents, cfg.eval_fraction, derive_seed(seed, &[1]))
        }
        DatasetConfig::Idx {
            images,
            labels,
            classes,
            subsample,
            eval_images,
            eval_labels,
        } => {
            let (imgs, lbls) = load_pair(&resolve(images, data_dir), &resolve(labels, data_dir))?;
            let mut data = from_idx(imgs, lbls, *classes)?;
            if let Some(n) = *subsample {
                let mut order: Vec<usize> = (0..data.labels.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2])));
                order.truncate(n);
                order.sort_unstable();
                data.features = order.iter().map(|&i| data.features[i].clone()).collect();
                data.labels = order.iter().map(|&i| data.labels[i]).collect();
            }
            match (eval_images, eval_labels) {
                (Some(ei), Some(el)) => {
                    let (shards, mut eval) = split_iid(&data, agents, 0.0, derive_seed(seed, &[1]));
                    let (imgs, lbls) = load_pair(&resolve(ei, data_dir), &resolve(el, data_dir))?;
                    let test = from_idx(imgs, lbls, *classes)?;
                    if test.dim != data.dim {
                        return Err(HarnessError::Data("evaluation images have a different size".into()));
                    }
                    for (x, &y) in test.features.iter().zip(&test.labels) {
                        eval.push(x, y);
                    }
                    (shards, eval)
                }
                (None, None) => split_iid(&data, agents, cfg.eval_fraction, derive_seed(seed, &[1])),
                _ => {
                    return Err(HarnessError::Data(
                        "dataset.eval_images and dataset.eval_labels go together".into(),
                    ))
                }
            }
        }
    };
    if let Some(s) = shards.iter().find(|s| s.len() < cfg.batch_size) {
        return Err(HarnessError::Data(format!(
            "shard of agent {} has {} samples, fewer than the batch size {}",
            s.owner,
            s.len(),
            cfg.batch_size
        )));
    }
    if eval.is_empty() {
        return Err(HarnessError::Data("evaluation set is empty".into()));
    }
    Ok((shards, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn histogram(s: &DatasetShard, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in s.labels() {
            h[l as usize] += 1;
        }
        h
    }

    #[test]
    fn sixty_thousand_over_ten() {
        let data = Samples {
            dim: 2,
            classes: 10,
            features: vec![vec![0.0, 1.0]; 60000],
            labels: (0..60000).map(|i| (i % 10) as u32).collect(),
        };
        let (shards, eval) = split_iid(&data, 10, 0.0, 3);
        assert!(shards.iter().all(|s| s.len() == 6000));
        assert!(eval.is_empty());
    }

    #[test]
    fn one_agent_gets_everything() {
        let data = synthetic(3, 300, 5, 1.0, 1);
        let (shards, eval) = split_iid(&data, 1, 0.0, 3);
        assert_eq!(shards[0].len(), 300);
        assert!(eval.is_empty());
    }

    #[test]
    fn shards_are_stratified() {
        for (samples, agents) in [(1000, 7), (1201, 5), (997, 3)] {
            let data = synthetic(4, samples, 3, 1.0, 8);
            let classes = 4;
            let (shards, eval) = split_iid(&data, agents, 0.1, 2);
            let n: usize = shards.iter().map(|s| s.len()).sum();
            assert_eq!(n + eval.len(), samples);
            let size = shards[0].len();
            assert!(shards.iter().all(|s| s.len() == size));
            let global = {
                let mut h = vec![0usize; classes];
                for s in &shards {
                    for (c, v) in histogram(s, classes).into_iter().enumerate() {
                        h[c] += v;
                    }
                }
                h
            };
            for s in &shards {
                for (c, v) in histogram(s, classes).into_iter().enumerate() {
                    let expected = global[c] as f64 / agents as f64;
                    assert!((v as f64 - expected).abs() <= 1.0, "class {c}: {v} vs {expected}");
                }
            }
        }
    }

    #[test]
    fn synthetic_is_seeded_and_biased() {
        let a = synthetic(3, 30, 4, 2.0, 5);
        assert_eq!(a, synthetic(3, 30, 4, 2.0, 5));
        assert_ne!(a, synthetic(3, 30, 4, 2.0, 6));
        assert!(a.features.iter().all(|x| x.len() == 4 && x[3] == 1.0));
    }
}
