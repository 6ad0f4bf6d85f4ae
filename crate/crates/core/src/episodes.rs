//! Episodic sampling and prototype-distance task selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassRecord, Regime, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::protocore::{PrototypeSet, TaskLayout};
use crate::registry::Registry;

/// How classes are drawn for the tasks of one episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSampling {
    /// One class draw per episode shared by all tasks; each task draws its
    /// own examples.
    #[default]
    PerEpisode,
    /// Every task draws its own classes.
    PerTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSampling {
    pub candidate_pool: usize,
    pub top: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub shots: usize,
    pub queries: usize,
    pub ways: usize,
    /// Tasks per episode (`M`) when task sampling is off.
    pub tasks: usize,
    pub task_sampling: Option<TaskSampling>,
    pub class_sampling: ClassSampling,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            shots: 1,
            queries: 5,
            ways: 5,
            tasks: 1,
            task_sampling: None,
            class_sampling: ClassSampling::PerEpisode,
        }
    }
}

impl EpisodeSpec {
    pub fn layout(&self) -> TaskLayout {
        TaskLayout {
            ways: self.ways,
            shots: self.shots,
            queries: self.queries,
        }
    }

    /// Tasks drawn by the sampler: the candidate pool when task sampling is on.
    pub fn drawn_tasks(&self) -> usize {
        self.task_sampling.map_or(self.tasks, |s| s.candidate_pool)
    }

    /// Tasks that end up in a training episode.
    pub fn episode_tasks(&self) -> usize {
        self.task_sampling.map_or(self.tasks, |s| s.top)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("shots", self.shots),
            ("queries", self.queries),
            ("ways", self.ways),
            ("tasks", self.tasks),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(s) = self.task_sampling {
            if s.top == 0 || s.top > s.candidate_pool {
                return Err(Error::Config(format!(
                    "task sampling needs 1 <= top <= candidate pool, got top {} of {}",
                    s.top, s.candidate_pool
                )));
            }
        }
        Ok(())
    }

    /// Checks that `classes` can satisfy this spec under `regime`.
    pub fn check_against(&self, classes: &[ClassRecord], regime: Regime) -> Result<()> {
        self.validate()?;
        let needed = self.shots + self.queries;
        if let Some(c) = classes.iter().find(|c| c.examples.len() < needed) {
            return Err(Error::ImpossibleSpec(format!(
                "{} shots + {} queries exceed the {} examples of class {}",
                self.shots,
                self.queries,
                c.examples.len(),
                c.class_id
            )));
        }
        if classes.len() < self.ways {
            return Err(Error::ImpossibleSpec(format!(
                "{}-way tasks need {} classes, only {} available",
                self.ways,
                self.ways,
                classes.len()
            )));
        }
        if regime == Regime::WithinAlphabet && eligible_alphabets(classes, self.ways).is_empty() {
            return Err(Error::ImpossibleSpec(format!(
                "no alphabet has {} classes for within-alphabet tasks",
                self.ways
            )));
        }
        Ok(())
    }
}

fn eligible_alphabets(classes: &[ClassRecord], ways: usize) -> Vec<Vec<usize>> {
    let mut by_alphabet: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        by_alphabet.entry(c.alphabet_id).or_default().push(i);
    }
    by_alphabet.into_values().filter(|v| v.len() >= ways).collect()
}

/// One few-shot task. Classes are positions into the sampled partition;
/// example lists are indices into each class's examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub class_ids: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Task {
    pub fn layout(&self) -> TaskLayout {
        TaskLayout {
            ways: self.classes.len(),
            shots: self.support.first().map_or(0, Vec::len),
            queries: self.query.first().map_or(0, Vec::len),
        }
    }

    /// Support images (class-major) followed by query images (class-major).
    pub fn batch<T: Scalar>(&self, classes: &[ClassRecord]) -> Result<Tensor<T>> {
        self.gather(classes, true, true)
    }

    /// Support images only.
    pub fn support_batch<T: Scalar>(&self, classes: &[ClassRecord]) -> Result<Tensor<T>> {
        self.gather(classes, true, false)
    }

    fn gather<T: Scalar>(&self, classes: &[ClassRecord], support: bool, query: bool) -> Result<Tensor<T>> {
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut push = |sets: &[Vec<usize>]| {
            for (pos, examples) in sets.iter().enumerate() {
                for &e in examples {
                    let img = &classes[self.classes[pos]].examples[e];
                    data.extend(img.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
                    rows += 1;
                }
            }
        };
        if support {
            push(&self.support);
        }
        if query {
            push(&self.query);
        }
        debug_assert_eq!(data.len(), rows * plane);
        Tensor::new(&[rows, 1, IMAGE_SIZE, IMAGE_SIZE], data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub index: u64,
    pub tasks: Vec<Task>,
}

impl Episode {
    /// Plain-text dump of class ids and example indices.
    pub fn manifest(&self) -> String {
        let mut out = format!("episode {}\n", self.index);
        for (i, t) in self.tasks.iter().enumerate() {
            let _ = writeln!(out, "task {i}");
            for (pos, id) in t.class_ids.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "  class {id} support {:?} query {:?}",
                    t.support[pos], t.query[pos]
                );
            }
        }
        out
    }
}

/// Draws episodes from one partition. The caller supplies the RNG stream.
pub struct EpisodeSampler<'a> {
    classes: &'a [ClassRecord],
    spec: EpisodeSpec,
    regime: Regime,
    alphabets: Vec<Vec<usize>>,
    next_index: u64,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(classes: &'a [ClassRecord], spec: EpisodeSpec, regime: Regime) -> Result<Self> {
        spec.check_against(classes, regime)?;
        Ok(Self {
            classes,
            spec,
            regime,
            alphabets: eligible_alphabets(classes, spec.ways),
            next_index: 0,
        })
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn classes(&self) -> &'a [ClassRecord] {
        self.classes
    }

    fn sample_classes(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self.regime {
            Regime::BetweenAlphabet => index::sample(rng, self.classes.len(), self.spec.ways).into_vec(),
            Regime::WithinAlphabet => {
                let pool = self.alphabets.choose(rng).expect("checked at construction");
                index::sample(rng, pool.len(), self.spec.ways)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect()
            }
        }
    }

    fn task_for(&self, classes: Vec<usize>, rng: &mut ChaCha8Rng) -> Task {
        let (shots, queries) = (self.spec.shots, self.spec.queries);
        let mut support = Vec::with_capacity(classes.len());
        let mut query = Vec::with_capacity(classes.len());
        for &c in &classes {
            let picks = index::sample(rng, self.classes[c].examples.len(), shots + queries).into_vec();
            support.push(picks[..shots].to_vec());
            query.push(picks[shots..].to_vec());
        }
        Task {
            class_ids: classes.iter().map(|&c| self.classes[c].class_id).collect(),
            classes,
            support,
            query,
        }
    }

    /// Draws `count` tasks into one episode following the class-sampling rule.
    pub fn sample_tasks(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Episode {
        let shared = match self.spec.class_sampling {
            ClassSampling::PerEpisode => Some(self.sample_classes(rng)),
            ClassSampling::PerTask => None,
        };
        let tasks = (0..count)
            .map(|_| {
                let classes = shared.clone().unwrap_or_else(|| self.sample_classes(rng));
                self.task_for(classes, rng)
            })
            .collect();
        let index = self.next_index;
        self.next_index += 1;
        Episode { index, tasks }
    }

    /// Draws `spec.drawn_tasks()` tasks: `M`, or the candidate pool when task
    /// sampling is on.
    pub fn sample_episode(&mut self, rng: &mut ChaCha8Rng) -> Episode {
        self.sample_tasks(self.spec.drawn_tasks(), rng)
    }

    /// A single task, as used by evaluation and the vanilla algorithm.
    pub fn sample_task(&mut self, rng: &mut ChaCha8Rng) -> Task {
        self.sample_tasks(1, rng).tasks.pop().unwrap()
    }
}

/// `max_k |c1_k - c2_k|^2` with prototypes aligned by class position.
pub fn task_distance<T: Scalar>(p1: &PrototypeSet<T>, p2: &PrototypeSet<T>) -> Result<f64> {
    if p1.ways() != p2.ways() {
        return Err(Error::PrototypeMismatch(p1.ways(), p2.ways()));
    }
    if p1.dim() != p2.dim() {
        return Err(Error::ShapeMismatch {
            op: "task_distance",
            dim: "embedding",
            expected: p1.dim(),
            actual: p2.dim(),
        });
    }
    Ok(p1
        .iter()
        .zip(p2.iter())
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = x.to_f64_lossy() - y.to_f64_lossy();
                    d * d
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max))
}

/// Symmetric pairwise distance matrix of a candidate pool.
pub fn distance_matrix<T: Scalar>(candidates: &[PrototypeSet<T>]) -> Result<Vec<Vec<f64>>> {
    let n = candidates.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = task_distance(&candidates[i], &candidates[j])?;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

/// Smallest pairwise distance within `subset`; infinite for fewer than two.
pub fn min_pairwise(distances: &[Vec<f64>], subset: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            best = best.min(distances[i][j]);
        }
    }
    best
}

/// Picks `top` of the candidates from their pairwise distances. Returned
/// indices are ascending.
pub trait TaskSelector: Send + Sync {
    fn name(&self) -> &'static str;
    fn select(&self, distances: &[Vec<f64>], top: usize) -> Vec<usize>;
}

/// Farthest-point traversal: start from the farthest pair, then repeatedly
/// add the candidate whose nearest selected task is farthest away. Lowest
/// index wins ties.
pub struct Greedy;

impl TaskSelector for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn select(&self, d: &[Vec<f64>], top: usize) -> Vec<usize> {
        let n = d.len();
        if top >= n {
            return (0..n).collect();
        }
        if top <= 1 {
            return vec![0];
        }
        let (mut bi, mut bj, mut best) = (0, 1, f64::NEG_INFINITY);
        for i in 0..n {
            for j in i + 1..n {
                if d[i][j] > best {
                    (bi, bj, best) = (i, j, d[i][j]);
                }
            }
        }
        let mut chosen = vec![bi, bj];
        let mut nearest: Vec<f64> = (0..n).map(|k| d[k][bi].min(d[k][bj])).collect();
        while chosen.len() < top {
            let mut pick = None;
            let mut pick_d = f64::NEG_INFINITY;
            for k in 0..n {
                if !chosen.contains(&k) && nearest[k] > pick_d {
                    pick = Some(k);
                    pick_d = nearest[k];
                }
            }
            let k = pick.expect("top < n leaves a candidate");
            chosen.push(k);
            for (m, v) in nearest.iter_mut().enumerate() {
                *v = v.min(d[m][k]);
            }
        }
        chosen.sort_unstable();
        chosen
    }
}

/// Enumerates every subset and keeps the one with the largest minimum
/// pairwise distance; the lexicographically first subset wins ties.
pub struct Exhaustive;

impl TaskSelector for Exhaustive {
    fn name(&self) -> &'static str {
        "exhaustive"
    }

    fn select(&self, d: &[Vec<f64>], top: usize) -> Vec<usize> {
        let n = d.len();
        let top = top.clamp(1, n.max(1));
        let mut subset: Vec<usize> = (0..top).collect();
        let mut best = subset.clone();
        let mut best_v = min_pairwise(d, &subset);
        // lexicographic successor of a k-combination of 0..n
        while let Some(i) = (0..top).rev().find(|&i| subset[i] < n - top + i) {
            subset[i] += 1;
            for j in i + 1..top {
                subset[j] = subset[j - 1] + 1;
            }
            let v = min_pairwise(d, &subset);
            if v > best_v {
                best_v = v;
                best.clone_from(&subset);
            }
        }
        best
    }
}

/// Subsets evaluated by `auto` before it falls back to the greedy rule.
pub const EXHAUSTIVE_LIMIT: u128 = 100_000;

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Exact search while the subset count stays below [`EXHAUSTIVE_LIMIT`],
/// greedy traversal beyond.
pub struct Auto;

impl TaskSelector for Auto {
    fn name(&self) -> &'static str {
        "auto"
    }

    fn select(&self, d: &[Vec<f64>], top: usize) -> Vec<usize> {
        if binomial(d.len(), top) <= EXHAUSTIVE_LIMIT {
            Exhaustive.select(d, top)
        } else {
            Greedy.select(d, top)
        }
    }
}

pub fn selectors() -> Registry<dyn TaskSelector> {
    Registry::new("task selector")
        .register("auto", &[], |_| Ok(Box::new(Auto) as Box<dyn TaskSelector>))
        .register("greedy", &["farthest_point"], |_| Ok(Box::new(Greedy)))
        .register("exhaustive", &["brute_force"], |_| Ok(Box::new(Exhaustive)))
}

/// Indices (ascending) of the `top` most mutually distant candidates.
pub fn select_diverse_tasks<T: Scalar>(
    candidates: &[PrototypeSet<T>],
    top: usize,
    selector: &dyn TaskSelector,
) -> Result<Vec<usize>> {
    if top == 0 || top > candidates.len() {
        return Err(Error::Config(format!(
            "cannot select {top} tasks from {} candidates",
            candidates.len()
        )));
    }
    let d = distance_matrix(candidates)?;
    Ok(selector.select(&d, top))
}

/// Uniform draw used by tests and benches that need random prototype sets.
pub fn random_prototypes(ways: usize, dim: usize, rng: &mut impl Rng) -> PrototypeSet<f64> {
    let v: Vec<Vec<f64>> = (0..ways)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    PrototypeSet::from_vectors(&v).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, Rotation, SyntheticSpec};
    use rand::SeedableRng;

    fn dummy_classes(n: usize, per_alphabet: usize, examples: usize) -> Vec<ClassRecord> {
        (0..n)
            .map(|i| ClassRecord {
                class_id: 100 + i,
                alphabet_id: i / per_alphabet,
                rotation: Rotation::R0,
                source: format!("c{i}"),
                examples: (0..examples)
                    .map(|e| Tensor::full(&[1, 28, 28], (i * examples + e) as f32).unwrap())
                    .collect(),
            })
            .collect()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn two_class_one_shot_one_query_is_disjoint() {
        let classes = dummy_classes(2, 2, 2);
        let spec = EpisodeSpec {
            shots: 1,
            queries: 1,
            ways: 2,
            ..Default::default()
        };
        let mut s = EpisodeSampler::new(&classes, spec, Regime::BetweenAlphabet).unwrap();
        let mut r = rng(0);
        for _ in 0..50 {
            let t = s.sample_task(&mut r);
            for k in 0..2 {
                assert_ne!(t.support[k], t.query[k]);
            }
        }
    }

    #[test]
    fn uniform_class_frequency() {
        let classes = dummy_classes(20, 20, 2);
        let spec = EpisodeSpec {
            shots: 1,
            queries: 1,
            ways: 5,
            ..Default::default()
        };
        let mut s = EpisodeSampler::new(&classes, spec, Regime::BetweenAlphabet).unwrap();
        let mut r = rng(7);
        let mut counts = [0usize; 20];
        for _ in 0..10_000 {
            for c in s.sample_task(&mut r).classes {
                counts[c] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn within_alphabet_tasks_are_pure() {
        let classes = dummy_classes(23, 6, 4);
        let spec = EpisodeSpec {
            shots: 2,
            queries: 2,
            ways: 5,
            tasks: 4,
            class_sampling: ClassSampling::PerTask,
            ..Default::default()
        };
        let mut s = EpisodeSampler::new(&classes, spec, Regime::WithinAlphabet).unwrap();
        let mut r = rng(1);
        for _ in 0..200 {
            for t in s.sample_episode(&mut r).tasks {
                let a = classes[t.classes[0]].alphabet_id;
                // the last alphabet holds 5 classes only and is still eligible
                assert!(t.classes.iter().all(|&c| classes[c].alphabet_id == a));
            }
        }
        let spec6 = EpisodeSpec { ways: 7, ..spec };
        assert!(EpisodeSampler::new(&classes, spec6, Regime::WithinAlphabet).is_err());
    }

    #[test]
    fn per_episode_sampling_shares_classes() {
        let classes = dummy_classes(20, 5, 6);
        let spec = EpisodeSpec {
            shots: 2,
            queries: 3,
            ways: 4,
            tasks: 5,
            ..Default::default()
        };
        let mut s = EpisodeSampler::new(&classes, spec, Regime::BetweenAlphabet).unwrap();
        let ep = s.sample_episode(&mut rng(3));
        assert_eq!(ep.tasks.len(), 5);
        assert!(ep.tasks.iter().all(|t| t.classes == ep.tasks[0].classes));
        let per_task = EpisodeSpec {
            class_sampling: ClassSampling::PerTask,
            ..spec
        };
        let mut s = EpisodeSampler::new(&classes, per_task, Regime::BetweenAlphabet).unwrap();
        let ep = s.sample_episode(&mut rng(3));
        assert!(ep.tasks.iter().any(|t| t.classes != ep.tasks[0].classes));
    }

    #[test]
    fn sampling_is_reproducible() {
        let classes = dummy_classes(12, 4, 5);
        let spec = EpisodeSpec {
            ways: 3,
            queries: 2,
            tasks: 3,
            ..Default::default()
        };
        let draw = |seed| {
            let mut s = EpisodeSampler::new(&classes, spec, Regime::WithinAlphabet).unwrap();
            let mut r = rng(seed);
            (0..5).map(|_| s.sample_episode(&mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn impossible_specs_are_rejected() {
        let classes = dummy_classes(4, 4, 3);
        let too_many = EpisodeSpec {
            shots: 2,
            queries: 2,
            ways: 2,
            ..Default::default()
        };
        assert!(EpisodeSampler::new(&classes, too_many, Regime::BetweenAlphabet).is_err());
        let too_wide = EpisodeSpec {
            shots: 1,
            queries: 1,
            ways: 5,
            ..Default::default()
        };
        assert!(EpisodeSampler::new(&classes, too_wide, Regime::BetweenAlphabet).is_err());
        let bad_top = EpisodeSpec {
            shots: 1,
            queries: 1,
            ways: 2,
            task_sampling: Some(TaskSampling {
                candidate_pool: 3,
                top: 4,
            }),
            ..Default::default()
        };
        assert!(bad_top.validate().is_err());
    }

    #[test]
    fn batch_layout_is_support_then_query() {
        let classes = dummy_classes(6, 6, 5);
        let spec = EpisodeSpec {
            shots: 2,
            queries: 1,
            ways: 3,
            ..Default::default()
        };
        let mut s = EpisodeSampler::new(&classes, spec, Regime::BetweenAlphabet).unwrap();
        let t = s.sample_task(&mut rng(2));
        let b: Tensor<f32> = t.batch(&classes).unwrap();
        assert_eq!(b.shape(), &[9, 1, 28, 28]);
        let layout = t.layout();
        let plane = 28 * 28;
        for k in 0..3 {
            for (j, &e) in t.support[k].iter().enumerate() {
                let row = layout.support_row(k, j);
                assert_eq!(b.data()[row * plane], (t.classes[k] * 5 + e) as f32);
            }
            let row = layout.query_row(k, 0);
            assert_eq!(b.data()[row * plane], (t.classes[k] * 5 + t.query[k][0]) as f32);
        }
        let manifest = Episode { index: 0, tasks: vec![t] }.manifest();
        assert!(manifest.starts_with("episode 0\ntask 0\n  class "));
    }

    #[test]
    fn synthetic_splits_feed_the_sampler() {
        let syn = make_synthetic(&SyntheticSpec::default(), 0).unwrap();
        let spec = EpisodeSpec::default();
        assert!(EpisodeSampler::new(&syn.split.test, spec, Regime::BetweenAlphabet).is_ok());
    }

    #[test]
    fn task_distance_examples() {
        let mut r = rng(5);
        let p = random_prototypes(4, 6, &mut r);
        assert_eq!(task_distance(&p, &p).unwrap(), 0.0);
        let a = PrototypeSet::from_vectors(&[vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let b = PrototypeSet::from_vectors(&[vec![3.0, 4.0, 0.0], vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(task_distance(&a, &b).unwrap(), 25.0);
        let c = PrototypeSet::from_vectors(&[vec![0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(task_distance(&a, &c), Err(Error::PrototypeMismatch(2, 1))));
    }

    #[test]
    fn task_distance_matches_loop_oracle() {
        let mut r = rng(6);
        for _ in 0..100 {
            let a = random_prototypes(5, 8, &mut r);
            let b = random_prototypes(5, 8, &mut r);
            let mut oracle: f64 = 0.0;
            for k in 0..5 {
                let mut s = 0.0;
                for i in 0..8 {
                    s += (a.get(k)[i] - b.get(k)[i]).powi(2);
                }
                oracle = oracle.max(s);
            }
            assert!((task_distance(&a, &b).unwrap() - oracle).abs() < 1e-12);
            assert_eq!(task_distance(&a, &b).unwrap(), task_distance(&b, &a).unwrap());
        }
    }

    fn points(xs: &[f64]) -> Vec<PrototypeSet<f64>> {
        xs.iter()
            .map(|&x| PrototypeSet::from_vectors(&[vec![x, 0.0]]).unwrap())
            .collect()
    }

    #[test]
    fn degenerate_selections() {
        let c = points(&[0.0, 1.0, 5.0, 2.0]);
        for name in selectors().names() {
            let s = selectors().create(name, &()).unwrap();
            assert_eq!(select_diverse_tasks(&c, 4, s.as_ref()).unwrap(), vec![0, 1, 2, 3]);
            assert_eq!(select_diverse_tasks(&c, 1, s.as_ref()).unwrap(), vec![0]);
            assert!(select_diverse_tasks(&c, 5, s.as_ref()).is_err());
        }
    }

    #[test]
    fn hand_placed_pool_matches_subset_enumeration() {
        // distances are squared gaps on a line
        let c = points(&[0.0, 1.0, 4.0, 6.0, 10.0]);
        let d = distance_matrix(&c).unwrap();
        let mut best = (f64::NEG_INFINITY, vec![]);
        for i in 0..5 {
            for j in i + 1..5 {
                for k in j + 1..5 {
                    let v = min_pairwise(&d, &[i, j, k]);
                    if v > best.0 {
                        best = (v, vec![i, j, k]);
                    }
                }
            }
        }
        assert_eq!(best.1, vec![0, 2, 4]);
        for name in selectors().names() {
            let s = selectors().create(name, &()).unwrap();
            assert_eq!(select_diverse_tasks(&c, 3, s.as_ref()).unwrap(), best.1, "{name}");
        }
    }

    #[test]
    fn greedy_is_not_always_optimal() {
        // the farthest pair (0, 6) pulls in 3, leaving a gap of 1
        let c = points(&[0.0, 2.0, 3.0, 4.0, 6.0]);
        let d = distance_matrix(&c).unwrap();
        let (g, e) = (Greedy.select(&d, 4), Exhaustive.select(&d, 4));
        assert_eq!(g, vec![0, 1, 2, 4]);
        assert_eq!(e, vec![0, 1, 3, 4]);
        assert!(min_pairwise(&d, &e) > min_pairwise(&d, &g));
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(5, 3), 10);
        assert_eq!(binomial(30, 3), 4060);
        assert_eq!(binomial(30, 15), 155_117_520);
        assert_eq!(binomial(3, 5), 0);
    }
}
