//! Multi-task weighted loss and the two-observation SPSA recursion that
//! estimates the per-task weights.
//!
//! The weighted objective for `M` task losses `L_i` and weights `w_i` is
//!
//! ```text
//! f(w) = sum_i L_i / w_i^2 + sum_i ln(w_i^2)
//! ```
//!
//! and each episode applies
//!
//! ```text
//! L+ = f(w + beta_n * delta),  L- = f(w - beta_n * delta)
//! w  <- w - alpha_n * delta * (L+ - L-) / (2 * beta_n)
//! ```
//!
//! with Rademacher `delta`. The convergence guarantee assumes a strongly
//! convex mean objective with Lipschitz gradient and bounded differences of
//! successive observation noise; none of that is checked at runtime.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible weight magnitude.
pub const OMEGA_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    pub alpha0: f64,
    pub beta0: f64,
    pub gamma: f64,
}

impl Default for GainSchedule {
    fn default() -> Self {
        Self {
            alpha0: 0.25,
            beta0: 15.0,
            gamma: 1.0 / 6.0,
        }
    }
}

impl GainSchedule {
    /// `(alpha_n, beta_n) = (alpha0 / n^gamma, beta0 / n^(gamma / 4))`.
    pub fn gain(&self, n: u64) -> Result<(f64, f64)> {
        if n < 1 {
            return Err(Error::InvalidHyperparameter {
                name: "SPSA iteration",
                value: n as f64,
            });
        }
        let n = n as f64;
        Ok((
            self.alpha0 / n.powf(self.gamma),
            self.beta0 / n.powf(self.gamma / 4.0),
        ))
    }
}

/// `sum_i L_i / w_i^2 + sum_i ln(w_i^2)`.
pub fn multitask_loss(task_losses: &[f64], weights: &[f64]) -> Result<f64> {
    if task_losses.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "multitask_loss",
            dim: "tasks",
            expected: weights.len(),
            actual: task_losses.len(),
        });
    }
    let mut total = 0.0;
    for (i, (&l, &w)) in task_losses.iter().zip(weights).enumerate() {
        if !(w.abs() >= OMEGA_MIN) {
            return Err(Error::WeightTooSmall {
                index: i,
                value: w,
                min: OMEGA_MIN,
            });
        }
        let w2 = w * w;
        total += l / w2 + w2.ln();
    }
    Ok(total)
}

/// Derivative of the weighted objective with respect to each task loss.
pub fn task_loss_scales(weights: &[f64]) -> Vec<f64> {
    weights.iter().map(|w| 1.0 / (w * w)).collect()
}

/// Sign-preserving clamp to `|w| >= OMEGA_MIN`; zero maps to `+OMEGA_MIN`.
pub fn project(w: f64) -> f64 {
    if w.abs() >= OMEGA_MIN {
        w
    } else if w < 0.0 {
        -OMEGA_MIN
    } else {
        OMEGA_MIN
    }
}

/// Independent symmetric `+-1` coordinates.
pub fn rademacher(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpsaObservation {
    pub n: u64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: Vec<f64>,
    pub loss_plus: f64,
    pub loss_minus: f64,
}

/// Current weight estimate and iteration counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpsaState {
    pub weights: Vec<f64>,
    pub iteration: u64,
    pub schedule: GainSchedule,
}

impl SpsaState {
    /// Starts from unit weights.
    pub fn new(tasks: usize, schedule: GainSchedule) -> Self {
        Self {
            weights: vec![1.0; tasks],
            iteration: 0,
            schedule,
        }
    }

    /// One recursion step with a freshly drawn perturbation.
    pub fn step(&mut self, task_losses: &[f64], rng: &mut impl Rng) -> Result<SpsaObservation> {
        let delta = rademacher(self.weights.len(), rng);
        self.step_with(task_losses, delta)
    }

    /// One recursion step with a given perturbation. Both observations reuse
    /// `task_losses`; only the weight-dependent combination is re-evaluated.
    pub fn step_with(&mut self, task_losses: &[f64], delta: Vec<f64>) -> Result<SpsaObservation> {
        if delta.len() != self.weights.len() {
            return Err(Error::ShapeMismatch {
                op: "spsa_step",
                dim: "perturbation",
                expected: self.weights.len(),
                actual: delta.len(),
            });
        }
        let n = self.iteration + 1;
        let (alpha, beta) = self.schedule.gain(n)?;
        let shifted = |sign: f64| -> Vec<f64> {
            self.weights
                .iter()
                .zip(&delta)
                .map(|(&w, &d)| project(w + sign * beta * d))
                .collect()
        };
        let loss_plus = multitask_loss(task_losses, &shifted(1.0))?;
        let loss_minus = multitask_loss(task_losses, &shifted(-1.0))?;
        let scale = alpha * (loss_plus - loss_minus) / (2.0 * beta);
        for (w, &d) in self.weights.iter_mut().zip(&delta) {
            *w = project(*w - scale * d);
        }
        self.iteration = n;
        Ok(SpsaObservation {
            n,
            alpha,
            beta,
            delta,
            loss_plus,
            loss_minus,
        })
    }
}

/// Convergence harness on `F(w) = |w - w*|^2` observed with additive
/// uniform noise in `[-noise, noise]`.
pub mod bench {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde::Serialize;

    use super::{rademacher, GainSchedule};

    #[derive(Debug, Clone, Serialize)]
    pub struct NoisyQuadratic {
        pub dim: usize,
        pub noise: f64,
        pub steps: u64,
        pub seeds: u64,
        pub schedule: GainSchedule,
    }

    impl Default for NoisyQuadratic {
        fn default() -> Self {
            Self {
                dim: 10,
                noise: 0.1,
                steps: 2000,
                seeds: 50,
                schedule: GainSchedule::default(),
            }
        }
    }

    #[derive(Debug, Clone, Serialize)]
    pub struct BenchReport {
        /// Mean over seeds of `|w_n - w*|^2` for `n = 1..=steps`.
        pub mean_sq_error: Vec<f64>,
    }

    impl BenchReport {
        pub fn at(&self, n: u64) -> f64 {
            self.mean_sq_error[n as usize - 1]
        }
    }

    impl NoisyQuadratic {
        /// Runs the unconstrained recursion from `w0 = 1` towards a target
        /// drawn uniformly in `[-1, 1]^dim` per seed.
        pub fn run(&self) -> BenchReport {
            let mut acc = vec![0.0; self.steps as usize];
            for seed in 0..self.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let target: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut w = vec![1.0; self.dim];
                for n in 1..=self.steps {
                    let (alpha, beta) = self.schedule.gain(n).expect("n >= 1");
                    let delta = rademacher(self.dim, &mut rng);
                    let observe = |sign: f64, rng: &mut ChaCha8Rng| {
                        let f: f64 = w
                            .iter()
                            .zip(&delta)
                            .zip(&target)
                            .map(|((&wi, &d), &t)| (wi + sign * beta * d - t).powi(2))
                            .sum();
                        f + rng.gen_range(-self.noise..=self.noise)
                    };
                    let plus = observe(1.0, &mut rng);
                    let minus = observe(-1.0, &mut rng);
                    let scale = alpha * (plus - minus) / (2.0 * beta);
                    for (wi, &d) in w.iter_mut().zip(&delta) {
                        *wi -= scale * d;
                    }
                    let err: f64 = w.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum();
                    acc[n as usize - 1] += err;
                }
            }
            let seeds = self.seeds as f64;
            BenchReport {
                mean_sq_error: acc.into_iter().map(|a| a / seeds).collect(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gain_schedule_values() {
        let s = GainSchedule::default();
        assert_eq!(s.gain(1).unwrap(), (0.25, 15.0));
        let (a64, _) = s.gain(64).unwrap();
        assert!((a64 - 0.125).abs() < 1e-12);
        let (a, b) = s.gain(1_000_000).unwrap();
        assert!(a > 0.0 && b > 0.0 && a < 0.25 && b < 15.0);
        assert!(s.gain(0).is_err());
        let mut prev = s.gain(1).unwrap();
        for n in 2..500 {
            let g = s.gain(n).unwrap();
            assert!(g.0 < prev.0 && g.1 < prev.1);
            prev = g;
        }
    }

    #[test]
    fn multitask_loss_reductions() {
        assert_eq!(multitask_loss(&[0.5], &[1.0]).unwrap(), 0.5);
        assert_eq!(multitask_loss(&[0.3, 0.9], &[1.0, 1.0]).unwrap(), 0.3 + 0.9);
        assert!(matches!(
            multitask_loss(&[1.0], &[1e-4]),
            Err(Error::WeightTooSmall { .. })
        ));
    }

    #[test]
    fn multitask_loss_matches_term_by_term_oracle() {
        let losses = [0.7, 1.3, 0.05];
        let weights: [f64; 3] = [0.8, -1.7, 2.5];
        let mut expected = 0.0;
        for i in 0..3 {
            expected += losses[i] / (weights[i] * weights[i]);
        }
        for w in weights {
            expected += (w * w).ln();
        }
        assert!((multitask_loss(&losses, &weights).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn single_coordinate_closed_form_step() {
        let mut state = SpsaState::new(1, GainSchedule::default());
        let obs = state.step_with(&[1.0], vec![1.0]).unwrap();
        // w+ = 16, w- = -14: f = 1/w^2 + ln w^2
        let plus = 1.0 / 256.0 + 256f64.ln();
        let minus = 1.0 / 196.0 + 196f64.ln();
        assert!((obs.loss_plus - plus).abs() < 1e-12);
        assert!((obs.loss_minus - minus).abs() < 1e-12);
        let expected = 1.0 - 0.25 * (plus - minus) / 30.0;
        assert!((state.weights[0] - expected).abs() < 1e-12);
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn equal_observations_leave_weights_unchanged() {
        // with two tasks of equal loss and opposite perturbation signs the
        // perturbed objectives coincide
        let mut state = SpsaState::new(2, GainSchedule::default());
        let obs = state.step_with(&[0.4, 0.4], vec![1.0, -1.0]).unwrap();
        assert_eq!(obs.loss_plus, obs.loss_minus);
        assert_eq!(state.weights, vec![1.0, 1.0]);
    }

    #[test]
    fn update_magnitude_is_uniform_across_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = SpsaState::new(5, GainSchedule::default());
        for _ in 0..50 {
            let before = state.weights.clone();
            let losses: Vec<f64> = (0..5).map(|i| 0.2 + 0.1 * i as f64).collect();
            let obs = state.step(&losses, &mut rng).unwrap();
            let expected = obs.alpha * (obs.loss_plus - obs.loss_minus).abs() / (2.0 * obs.beta);
            for (a, b) in state.weights.iter().zip(&before) {
                if a.abs() > OMEGA_MIN {
                    assert!(((a - b).abs() - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn perturbations_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut sums = vec![0.0; 3];
        for _ in 0..10_000 {
            for (s, d) in sums.iter_mut().zip(rademacher(3, &mut rng)) {
                assert!(d == 1.0 || d == -1.0);
                *s += d;
            }
        }
        assert!(sums.iter().all(|s| (s / 10_000.0f64).abs() < 0.05));
    }

    #[test]
    fn projection_preserves_sign() {
        assert_eq!(project(0.5), 0.5);
        assert_eq!(project(1e-5), OMEGA_MIN);
        assert_eq!(project(-1e-5), -OMEGA_MIN);
        assert_eq!(project(0.0), OMEGA_MIN);
        assert_eq!(project(-3.0), -3.0);
    }

    #[test]
    fn noisy_quadratic_error_decreases() {
        // with dim 10 the early iterates overshoot until alpha_n drops
        // below about 0.1 (n near 250), then contract quickly
        let report = bench::NoisyQuadratic::default().run();
        assert!(report.at(2000) < 0.25 * report.at(10));
        assert!(report.at(2000) < report.at(1000));
    }
}
