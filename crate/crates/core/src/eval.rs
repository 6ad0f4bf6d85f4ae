//! Few-shot evaluation: nearest-prototype accuracy over sampled episodes.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassRecord, Regime};
use crate::embednet::EmbeddingNetwork;
use crate::episodes::{EpisodeSampler, EpisodeSpec, Task};
use crate::error::{Error, Result};
use crate::numerics::{NormMode, Tensor};
use crate::protocore::{classify, prototypes_from_batch, Distance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub shots: usize,
    pub ways: usize,
    pub queries: usize,
    pub episodes: usize,
    pub distance: Distance,
    /// Normalize with each episode's own batch statistics instead of the
    /// running statistics.
    pub batch_stats: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            shots: 1,
            ways: 5,
            queries: 5,
            episodes: 1000,
            distance: Distance::SquaredEuclidean,
            batch_stats: false,
        }
    }
}

impl EvalSpec {
    fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            shots: self.shots,
            queries: self.queries,
            ways: self.ways,
            tasks: 1,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub shots: usize,
    pub ways: usize,
    pub queries: usize,
    pub regime: Regime,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>, spec: &EvalSpec, regime: Regime) -> Self {
        let (mean_accuracy, ci95) = mean_ci95(&accuracies);
        Self {
            mean_accuracy,
            ci95,
            episodes: accuracies.len(),
            shots: spec.shots,
            ways: spec.ways,
            queries: spec.queries,
            regime,
            accuracies,
        }
    }

    /// `accuracy +- ci` in percent, bounds clamped to `[0, 100]`.
    pub fn display(&self) -> String {
        let lo = (self.mean_accuracy - self.ci95).max(0.0);
        let hi = (self.mean_accuracy + self.ci95).min(1.0);
        format!(
            "{}-shot {}-way {}: {:.2} +- {:.2} % ({:.2}..{:.2}) over {} episodes",
            self.shots,
            self.ways,
            self.regime,
            100.0 * self.mean_accuracy,
            100.0 * self.ci95,
            100.0 * lo,
            100.0 * hi,
            self.episodes
        )
    }
}

/// Mean and `1.96 * s / sqrt(n)` with the `n - 1` sample standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Evaluates with embeddings supplied per task: `embed` returns the task
/// batch embeddings, support rows first.
pub fn evaluate_with(
    classes: &[ClassRecord],
    regime: Regime,
    spec: &EvalSpec,
    seed: u64,
    mut embed: impl FnMut(&Task) -> Result<Tensor<f32>>,
) -> Result<EvalReport> {
    if spec.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut sampler = EpisodeSampler::new(classes, spec.episode_spec(), regime)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accuracies = Vec::with_capacity(spec.episodes);
    for _ in 0..spec.episodes {
        let task = sampler.sample_task(&mut rng);
        let emb = embed(&task)?;
        let layout = task.layout();
        let protos = prototypes_from_batch(&emb, layout)?;
        let mut correct = 0;
        for k in 0..layout.ways {
            for j in 0..layout.queries {
                correct += (classify(emb.row(layout.query_row(k, j)), &protos, spec.distance) == k) as usize;
            }
        }
        accuracies.push(correct as f64 / (layout.ways * layout.queries) as f64);
    }
    Ok(EvalReport::from_accuracies(accuracies, spec, regime))
}

/// Embeds every example of `classes` once in eval mode.
pub fn embed_all(net: &EmbeddingNetwork<f32>, classes: &[ClassRecord]) -> Result<Vec<Vec<Vec<f32>>>> {
    let plane: usize = classes
        .first()
        .and_then(|c| c.examples.first())
        .map_or(0, |e| e.len());
    classes
        .iter()
        .map(|c| {
            let mut data = Vec::with_capacity(c.examples.len() * plane);
            for e in &c.examples {
                data.extend_from_slice(e.data());
            }
            let mut shape = vec![c.examples.len()];
            shape.extend_from_slice(c.examples[0].shape());
            let emb = net.embed(&Tensor::new(&shape, data)?, NormMode::Eval)?;
            Ok((0..c.examples.len()).map(|i| emb.row(i).to_vec()).collect())
        })
        .collect()
}

fn gather(task: &Task, table: &[Vec<Vec<f32>>]) -> Result<Tensor<f32>> {
    let dim = table[task.classes[0]][0].len();
    let mut data = Vec::new();
    for sets in [&task.support, &task.query] {
        for (pos, examples) in sets.iter().enumerate() {
            for &e in examples {
                data.extend_from_slice(&table[task.classes[pos]][e]);
            }
        }
    }
    let rows = data.len() / dim;
    Tensor::new(&[rows, dim], data)
}

/// Evaluates `net` on `classes`. Inference is weight-free: only the
/// embedding and nearest-prototype rule are used.
pub fn evaluate(
    net: &EmbeddingNetwork<f32>,
    classes: &[ClassRecord],
    regime: Regime,
    spec: &EvalSpec,
    seed: u64,
) -> Result<EvalReport> {
    if spec.batch_stats {
        return evaluate_with(classes, regime, spec, seed, |task| {
            net.embed(&task.batch(classes)?, NormMode::BatchStats)
        });
    }
    spec.episode_spec().check_against(classes, regime)?;
    let table = embed_all(net, classes)?;
    evaluate_with(classes, regime, spec, seed, |task| gather(task, &table))
}

/// Metrics CSV with one row per evaluated configuration.
pub fn metrics_csv(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("config,shots,ways,regime,queries,episodes,accuracy,ci95\n");
    for (config, r) in rows {
        let _ = writeln!(
            out,
            "{config},{},{},{},{},{},{},{}",
            r.shots, r.ways, r.regime, r.queries, r.episodes, r.mean_accuracy, r.ci95
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::embednet::NetConfig;

    #[test]
    fn ci_matches_direct_formula() {
        let acc = [0.2, 0.4, 0.4, 0.6, 1.0, 0.8];
        let mean = 3.4 / 6.0;
        let ss: f64 = acc.iter().map(|a| (a - mean) * (a - mean)).sum();
        let expected = 1.96 * (ss / 5.0).sqrt() / 6f64.sqrt();
        let (m, ci) = mean_ci95(&acc);
        assert!((m - mean).abs() < 1e-12);
        assert!((ci - expected).abs() < 1e-12);
        assert_eq!(mean_ci95(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn one_hot_embedding_is_perfect() {
        let syn = make_synthetic(&SyntheticSpec::default(), 0).unwrap();
        let classes = &syn.split.test;
        let spec = EvalSpec {
            episodes: 50,
            ..Default::default()
        };
        let report = evaluate_with(classes, Regime::BetweenAlphabet, &spec, 3, |task| {
            let layout = task.layout();
            let mut t = Tensor::zeros(&[layout.batch_size(), classes.len()])?;
            let dim = classes.len();
            for k in 0..layout.ways {
                for j in 0..layout.shots {
                    t.data_mut()[layout.support_row(k, j) * dim + task.classes[k]] = 1.0;
                }
                for j in 0..layout.queries {
                    t.data_mut()[layout.query_row(k, j) * dim + task.classes[k]] = 1.0;
                }
            }
            Ok(t)
        })
        .unwrap();
        assert_eq!(report.mean_accuracy, 1.0);
        assert_eq!(report.ci95, 0.0);
    }

    #[test]
    fn evaluation_is_repeatable_and_cached_path_agrees() {
        let syn = make_synthetic(&SyntheticSpec::default(), 1).unwrap();
        let net = EmbeddingNetwork::<f32>::init(
            NetConfig {
                channels: 8,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let spec = EvalSpec {
            episodes: 20,
            ..Default::default()
        };
        let a = evaluate(&net, &syn.split.test, Regime::BetweenAlphabet, &spec, 9).unwrap();
        let b = evaluate(&net, &syn.split.test, Regime::BetweenAlphabet, &spec, 9).unwrap();
        assert_eq!(a, b);
        // per-task forward in eval mode must agree with the cached table
        let direct = evaluate_with(&syn.split.test, Regime::BetweenAlphabet, &spec, 9, |task| {
            net.embed(&task.batch(&syn.split.test)?, NormMode::Eval)
        })
        .unwrap();
        assert_eq!(a.accuracies, direct.accuracies);
    }

    #[test]
    fn too_few_classes_is_an_error() {
        let syn = make_synthetic(&SyntheticSpec::default(), 1).unwrap();
        let net = EmbeddingNetwork::<f32>::init(NetConfig::default(), 0).unwrap();
        let spec = EvalSpec {
            ways: 20,
            ..Default::default()
        };
        assert!(evaluate(&net, &syn.split.test, Regime::BetweenAlphabet, &spec, 0).is_err());
    }

    #[test]
    fn display_clamps_bounds_only() {
        let spec = EvalSpec::default();
        let r = EvalReport::from_accuracies(vec![1.0, 1.0, 0.9], &spec, Regime::WithinAlphabet);
        assert!(r.mean_accuracy + r.ci95 > 1.0);
        assert!(r.display().contains("..100.00)"), "{}", r.display());
    }
}
