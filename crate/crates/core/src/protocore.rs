//! Prototype computation, distance-softmax losses and nearest-prototype
//! classification.
//!
//! Task embeddings are laid out as one batch: the `ways * shots` support rows
//! (class-major) followed by the `ways * queries` query rows (class-major).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl Distance {
    pub fn eval<T: Scalar>(self, a: &[T], b: &[T]) -> T {
        let sq: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
        match self {
            Distance::SquaredEuclidean => sq,
            Distance::Euclidean => sq.sqrt(),
        }
    }

    /// Adds `scale * d distance(query, proto) / d query` into `out`.
    fn grad_query<T: Scalar>(self, query: &[T], proto: &[T], scale: T, out: &mut [T]) {
        let factor = match self {
            Distance::SquaredEuclidean => T::from_f64_lossy(2.0),
            Distance::Euclidean => {
                let d = self.eval(query, proto);
                if d > T::zero() {
                    T::one() / d
                } else {
                    T::zero()
                }
            }
        };
        for ((o, &q), &c) in out.iter_mut().zip(query).zip(proto) {
            *o = *o + scale * factor * (q - c);
        }
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" | "squared_euclidean" => Ok(Distance::SquaredEuclidean),
            "euclidean" => Ok(Distance::Euclidean),
            other => Err(Error::UnknownStrategy {
                kind: "distance",
                name: other.to_string(),
                available: "squared, euclidean".into(),
            }),
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::SquaredEuclidean => "squared",
            Distance::Euclidean => "euclidean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskLayout {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl TaskLayout {
    pub fn support_row(&self, class: usize, shot: usize) -> usize {
        class * self.shots + shot
    }

    pub fn query_row(&self, class: usize, query: usize) -> usize {
        self.ways * self.shots + class * self.queries + query
    }

    pub fn batch_size(&self) -> usize {
        self.ways * (self.shots + self.queries)
    }

    fn check(&self, embeddings: &Tensor<impl Scalar>) -> Result<usize> {
        let [rows, dim] = embeddings.dims2("task embeddings")?;
        if rows != self.batch_size() {
            return Err(Error::ShapeMismatch {
                op: "task embeddings",
                dim: "rows",
                expected: self.batch_size(),
                actual: rows,
            });
        }
        if self.ways == 0 {
            return Err(Error::ImpossibleSpec("a task needs at least one class".into()));
        }
        if self.shots == 0 {
            return Err(Error::EmptyClass(0));
        }
        Ok(dim)
    }
}

/// Class prototypes, indexed by class position within a task.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn from_vectors(protos: &[Vec<T>]) -> Result<Self> {
        let dim = protos.first().map_or(0, Vec::len);
        if protos.iter().any(|p| p.len() != dim) {
            return Err(Error::ShapeMismatch {
                op: "prototypes",
                dim: "embedding",
                expected: dim,
                actual: protos.iter().map(Vec::len).find(|&l| l != dim).unwrap(),
            });
        }
        Ok(Self {
            dim,
            data: protos.concat(),
        })
    }

    pub fn ways(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, k: usize) -> &[T] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.dim.max(1))
    }

    pub fn cast<U: Scalar>(&self) -> PrototypeSet<U> {
        PrototypeSet {
            dim: self.dim,
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// Per-class means of the support embeddings.
pub fn compute_prototypes<T: Scalar>(support: &[Vec<&[T]>]) -> Result<PrototypeSet<T>> {
    let dim = support
        .iter()
        .flat_map(|c| c.first())
        .map(|e| e.len())
        .next()
        .unwrap_or(0);
    let mut data = Vec::with_capacity(support.len() * dim);
    for (k, class) in support.iter().enumerate() {
        if class.is_empty() {
            return Err(Error::EmptyClass(k));
        }
        let mut mean = vec![T::zero(); dim];
        for e in class {
            if e.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "compute_prototypes",
                    dim: "embedding",
                    expected: dim,
                    actual: e.len(),
                });
            }
            for (m, &v) in mean.iter_mut().zip(e.iter()) {
                *m = *m + v;
            }
        }
        let n = T::from_usize(class.len()).unwrap();
        data.extend(mean.into_iter().map(|m| m / n));
    }
    Ok(PrototypeSet { dim, data })
}

/// Prototypes of the support rows of a task batch.
pub fn prototypes_from_batch<T: Scalar>(
    embeddings: &Tensor<T>,
    layout: TaskLayout,
) -> Result<PrototypeSet<T>> {
    layout.check(embeddings)?;
    let support: Vec<Vec<&[T]>> = (0..layout.ways)
        .map(|k| {
            (0..layout.shots)
                .map(|j| embeddings.row(layout.support_row(k, j)))
                .collect()
        })
        .collect();
    compute_prototypes(&support)
}

fn logits<T: Scalar>(query: &[T], prototypes: &PrototypeSet<T>, distance: Distance) -> Vec<T> {
    prototypes.iter().map(|p| -distance.eval(query, p)).collect()
}

fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Class probabilities `softmax(-distance)`.
pub fn class_probabilities<T: Scalar>(
    query: &[T],
    prototypes: &PrototypeSet<T>,
    distance: Distance,
) -> Vec<T> {
    let z = logits(query, prototypes, distance);
    let lse = log_sum_exp(&z);
    z.iter().map(|&v| (v - lse).exp()).collect()
}

/// Negative log-probability of `true_class` under `softmax(-distance)`.
pub fn class_loss<T: Scalar>(
    query: &[T],
    prototypes: &PrototypeSet<T>,
    true_class: usize,
    distance: Distance,
) -> T {
    let z = logits(query, prototypes, distance);
    // never negative, even where rounding makes lse fall a hair below z[k]
    (log_sum_exp(&z) - z[true_class]).max(T::zero())
}

/// Nearest prototype; ties go to the lowest class position.
pub fn classify<T: Scalar>(query: &[T], prototypes: &PrototypeSet<T>, distance: Distance) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (k, p) in prototypes.iter().enumerate() {
        let d = distance.eval(query, p);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    /// `per_query[k][j]` is the loss of query `j` of class `k`.
    pub per_query: Vec<Vec<T>>,
    /// Mean over classes of the per-class mean query loss.
    pub task_loss: T,
}

fn mean<T: Scalar>(v: impl Iterator<Item = T>) -> T {
    let mut n = 0usize;
    let s = v.inspect(|_| n += 1).sum::<T>();
    s / T::from_usize(n).unwrap()
}

/// Task loss of a task batch.
pub fn episode_task_loss<T: Scalar>(
    embeddings: &Tensor<T>,
    layout: TaskLayout,
    distance: Distance,
) -> Result<LossBreakdown<T>> {
    if layout.queries == 0 {
        return Err(Error::ImpossibleSpec("a task needs at least one query per class".into()));
    }
    let protos = prototypes_from_batch(embeddings, layout)?;
    let per_query: Vec<Vec<T>> = (0..layout.ways)
        .map(|k| {
            (0..layout.queries)
                .map(|j| class_loss(embeddings.row(layout.query_row(k, j)), &protos, k, distance))
                .collect()
        })
        .collect();
    let task_loss = mean(per_query.iter().map(|c| mean(c.iter().copied())));
    Ok(LossBreakdown {
        per_query,
        task_loss,
    })
}

/// Task loss and its gradient with respect to every row of the batch,
/// through both the query embeddings and the prototypes.
pub fn task_loss_with_grad<T: Scalar>(
    embeddings: &Tensor<T>,
    layout: TaskLayout,
    distance: Distance,
) -> Result<(LossBreakdown<T>, Tensor<T>)> {
    let breakdown = episode_task_loss(embeddings, layout, distance)?;
    let protos = prototypes_from_batch(embeddings, layout)?;
    let dim = protos.dim();
    let mut grad = Tensor::zeros_like(embeddings);
    let mut proto_grad = vec![T::zero(); layout.ways * dim];
    let weight = T::one() / T::from_usize(layout.ways * layout.queries).unwrap();
    for k in 0..layout.ways {
        for j in 0..layout.queries {
            let row = layout.query_row(k, j);
            let query = embeddings.row(row).to_vec();
            let probs = class_probabilities(&query, &protos, distance);
            let q_grad = &mut grad.data_mut()[row * dim..(row + 1) * dim];
            for (m, &p) in probs.iter().enumerate() {
                // d loss / d logit_m = p_m - [m == k]; logit_m = -distance(q, c_m)
                let coef = weight * (p - if m == k { T::one() } else { T::zero() });
                distance.grad_query(&query, protos.get(m), -coef, q_grad);
                distance.grad_query(&query, protos.get(m), coef, &mut proto_grad[m * dim..(m + 1) * dim]);
            }
        }
    }
    let inv_shots = T::one() / T::from_usize(layout.shots).unwrap();
    for k in 0..layout.ways {
        for j in 0..layout.shots {
            let row = layout.support_row(k, j);
            for (g, &pg) in grad.data_mut()[row * dim..(row + 1) * dim]
                .iter_mut()
                .zip(&proto_grad[k * dim..(k + 1) * dim])
            {
                *g = *g + pg * inv_shots;
            }
        }
    }
    Ok((breakdown, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_loss(q: &[f64], protos: &[Vec<f64>], k: usize) -> f64 {
        let e: Vec<f64> = protos
            .iter()
            .map(|p| (-q.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).exp())
            .collect();
        -(e[k] / e.iter().sum::<f64>()).ln()
    }

    fn random_batch(layout: TaskLayout, dim: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[layout.batch_size(), dim], |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn single_shot_prototype_is_the_embedding() {
        let e = vec![0.5f64, -1.0, 2.0];
        let p = compute_prototypes(&[vec![e.as_slice()]]).unwrap();
        assert_eq!(p.get(0), e.as_slice());
    }

    #[test]
    fn opposite_embeddings_average_to_zero() {
        let v = vec![1.5f64, -2.0];
        let nv: Vec<f64> = v.iter().map(|x| -x).collect();
        let p = compute_prototypes(&[vec![v.as_slice(), nv.as_slice()]]).unwrap();
        assert_eq!(p.get(0), &[0.0, 0.0]);
    }

    #[test]
    fn prototype_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let embs: Vec<Vec<f64>> = (0..5).map(|_| (0..64).map(|_| rng.gen()).collect()).collect();
        let refs: Vec<&[f64]> = embs.iter().map(Vec::as_slice).collect();
        let p = compute_prototypes(&[refs]).unwrap();
        for d in 0..64 {
            let mut s = 0.0;
            for e in &embs {
                s += e[d];
            }
            assert!((p.get(0)[d] - s / 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_class_is_an_error() {
        let e = vec![1.0f64];
        let err = compute_prototypes(&[vec![e.as_slice()], vec![]]).unwrap_err();
        assert!(matches!(err, Error::EmptyClass(1)));
    }

    #[test]
    fn equidistant_prototypes_give_log_ways() {
        let q = vec![0.0f64, 0.0];
        let p = PrototypeSet::from_vectors(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert!((class_loss(&q, &p, 0, Distance::SquaredEuclidean) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn class_loss_matches_naive_softmax() {
        let protos = vec![vec![0.3, -0.2, 1.0], vec![-0.5, 0.4, 0.0], vec![1.2, 0.1, -0.7]];
        let q = vec![0.1, 0.0, 0.2];
        let p = PrototypeSet::from_vectors(&protos).unwrap();
        for k in 0..3 {
            let fast = class_loss(&q, &p, k, Distance::SquaredEuclidean);
            assert!((fast - naive_loss(&q, &protos, k)).abs() < 1e-6);
        }
    }

    #[test]
    fn stabilized_loss_survives_large_distances() {
        let p = PrototypeSet::from_vectors(&[vec![0.0f64], vec![1e3]]).unwrap();
        let l = class_loss(&[1e3], &p, 0, Distance::SquaredEuclidean);
        assert!(l.is_finite());
        assert!((l - 1e6).abs() < 1e-6);
        assert_eq!(class_loss(&[1e3], &p, 1, Distance::SquaredEuclidean), 0.0);
    }

    #[test]
    fn saturated_task_loss_is_near_zero() {
        let layout = TaskLayout {
            ways: 3,
            shots: 1,
            queries: 2,
        };
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut rows = Vec::new();
        for c in &centers {
            rows.extend_from_slice(c);
        }
        for c in &centers {
            rows.extend_from_slice(c);
            rows.extend_from_slice(c);
        }
        let t = Tensor::new(&[9, 2], rows).unwrap();
        let l = episode_task_loss(&t, layout, Distance::SquaredEuclidean).unwrap();
        assert!(l.task_loss < 1e-30);
    }

    #[test]
    fn task_loss_is_invariant_to_class_order() {
        let layout = TaskLayout {
            ways: 3,
            shots: 2,
            queries: 2,
        };
        let t = random_batch(layout, 4, 9);
        let perm = [2usize, 0, 1];
        let mut rows = Vec::new();
        for &k in &perm {
            for j in 0..2 {
                rows.extend_from_slice(t.row(layout.support_row(k, j)));
            }
        }
        for &k in &perm {
            for j in 0..2 {
                rows.extend_from_slice(t.row(layout.query_row(k, j)));
            }
        }
        let permuted = Tensor::new(t.shape(), rows).unwrap();
        let a = episode_task_loss(&t, layout, Distance::SquaredEuclidean).unwrap();
        let b = episode_task_loss(&permuted, layout, Distance::SquaredEuclidean).unwrap();
        assert!((a.task_loss - b.task_loss).abs() < 1e-12);
    }

    #[test]
    fn task_loss_matches_flat_summation() {
        let layout = TaskLayout {
            ways: 3,
            shots: 2,
            queries: 3,
        };
        let t = random_batch(layout, 5, 21);
        let protos: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                (0..5)
                    .map(|d| (t.row(layout.support_row(k, 0))[d] + t.row(layout.support_row(k, 1))[d]) / 2.0)
                    .collect()
            })
            .collect();
        let mut flat = 0.0;
        for k in 0..3 {
            for j in 0..3 {
                flat += naive_loss(t.row(layout.query_row(k, j)), &protos, k) / 9.0;
            }
        }
        let l = episode_task_loss(&t, layout, Distance::SquaredEuclidean).unwrap();
        assert!((l.task_loss - flat).abs() < 1e-6);
        assert!(l.per_query.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for distance in [Distance::SquaredEuclidean, Distance::Euclidean] {
            let layout = TaskLayout {
                ways: 3,
                shots: 2,
                queries: 2,
            };
            let t = random_batch(layout, 4, 33);
            let (_, g) = task_loss_with_grad(&t, layout, distance).unwrap();
            let h = 1e-5;
            for i in 0..t.len() {
                let mut plus = t.clone();
                plus.data_mut()[i] += h;
                let mut minus = t.clone();
                minus.data_mut()[i] -= h;
                let fd = (episode_task_loss(&plus, layout, distance).unwrap().task_loss
                    - episode_task_loss(&minus, layout, distance).unwrap().task_loss)
                    / (2.0 * h);
                let a = g.data()[i];
                assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0), "{distance}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn classify_picks_nearest_and_is_translation_invariant() {
        let protos = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![3.0, -1.0]];
        let p = PrototypeSet::from_vectors(&protos).unwrap();
        assert_eq!(classify(&[3.0, -1.0], &p, Distance::SquaredEuclidean), 2);
        let shift = [5.0, -7.0];
        let shifted: Vec<Vec<f64>> = protos.iter().map(|v| vec![v[0] + shift[0], v[1] + shift[1]]).collect();
        let ps = PrototypeSet::from_vectors(&shifted).unwrap();
        for q in [[0.4, 0.6], [2.0, 0.0], [-1.0, 2.0]] {
            let qs = [q[0] + shift[0], q[1] + shift[1]];
            assert_eq!(
                classify(&q, &p, Distance::SquaredEuclidean),
                classify(&qs, &ps, Distance::SquaredEuclidean)
            );
        }
        // exact tie between positions 0 and 1
        assert_eq!(classify(&[0.5, 0.5], &p, Distance::SquaredEuclidean), 0);
    }

    #[test]
    fn classify_matches_linear_scan_and_softmax_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let protos: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = PrototypeSet::from_vectors(&protos).unwrap();
            let mut best = 0;
            for k in 1..5 {
                let dk: f64 = q.iter().zip(&protos[k]).map(|(a, b)| (a - b).powi(2)).sum();
                let db: f64 = q.iter().zip(&protos[best]).map(|(a, b)| (a - b).powi(2)).sum();
                if dk < db {
                    best = k;
                }
            }
            assert_eq!(classify(&q, &p, Distance::SquaredEuclidean), best);
            let probs = class_probabilities(&q, &p, Distance::SquaredEuclidean);
            let argmax = (0..5).fold(0, |b, k| if probs[k] > probs[b] { k } else { b });
            assert_eq!(argmax, best);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
