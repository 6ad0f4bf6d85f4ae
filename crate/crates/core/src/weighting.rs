//! Task-weighting strategies for multi-task episodes, selected by mode name.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Checkpoint;
use crate::registry::Registry;
use crate::spsa::{GainSchedule, SpsaObservation, SpsaState};

#[derive(Debug, Clone, Copy)]
pub struct WeightingArgs {
    pub tasks: usize,
    pub schedule: GainSchedule,
}

/// Supplies the weights `w` of `sum L_i / w_i^2 + sum log w_i^2` and may
/// adapt them from observed task losses.
pub trait TaskWeighting: Send {
    fn name(&self) -> &'static str;

    /// Train one task per episode with plain prototypical loss.
    fn single_task(&self) -> bool {
        false
    }

    /// Weights for the current episode.
    fn episode_weights(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;

    /// Feeds back this episode's task losses.
    fn observe(&mut self, _task_losses: &[f64], _rng: &mut ChaCha8Rng) -> Result<Option<SpsaObservation>> {
        Ok(None)
    }

    /// Latest weight estimate, logged as the weight trajectory.
    fn current(&self) -> Vec<f64>;

    fn save(&self, _ckpt: &mut Checkpoint) {}

    fn restore(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Single task, unit weight.
pub struct Vanilla;

impl TaskWeighting for Vanilla {
    fn name(&self) -> &'static str {
        "vanilla"
    }

    fn single_task(&self) -> bool {
        true
    }

    fn episode_weights(&mut self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![1.0]
    }

    fn current(&self) -> Vec<f64> {
        vec![1.0]
    }
}

/// All weights fixed at 1.
pub struct Equal(usize);

impl TaskWeighting for Equal {
    fn name(&self) -> &'static str {
        "multitask_fixed_equal"
    }

    fn episode_weights(&mut self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![1.0; self.0]
    }

    fn current(&self) -> Vec<f64> {
        vec![1.0; self.0]
    }
}

/// Fresh weights uniform in `[0.5, 2]` every episode.
pub struct RandomWeights {
    tasks: usize,
    last: Vec<f64>,
}

impl TaskWeighting for RandomWeights {
    fn name(&self) -> &'static str {
        "multitask_fixed_random"
    }

    fn episode_weights(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.last = (0..self.tasks).map(|_| rng.gen_range(0.5..=2.0)).collect();
        self.last.clone()
    }

    fn current(&self) -> Vec<f64> {
        self.last.clone()
    }
}

/// Weights estimated by the SPSA recursion, one step per episode.
pub struct Spsa(SpsaState);

impl Spsa {
    pub fn state(&self) -> &SpsaState {
        &self.0
    }
}

impl TaskWeighting for Spsa {
    fn name(&self) -> &'static str {
        "multitask_spsa"
    }

    fn episode_weights(&mut self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.0.weights.clone()
    }

    fn observe(&mut self, task_losses: &[f64], rng: &mut ChaCha8Rng) -> Result<Option<SpsaObservation>> {
        self.0.step(task_losses, rng).map(Some)
    }

    fn current(&self) -> Vec<f64> {
        self.0.weights.clone()
    }

    fn save(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("spsa.iteration", self.0.iteration);
        // shortest round-trip decimal, so restore is exact
        let w: Vec<String> = self.0.weights.iter().map(f64::to_string).collect();
        ckpt.set_meta("spsa.weights", w.join(","));
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let weights = ckpt
            .meta("spsa.weights")?
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Checkpoint(format!("bad spsa weight `{v}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if weights.len() != self.0.weights.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} task weights, expected {}",
                weights.len(),
                self.0.weights.len()
            )));
        }
        self.0.weights = weights;
        self.0.iteration = ckpt.meta_parsed("spsa.iteration")?;
        Ok(())
    }
}

pub fn weightings() -> Registry<dyn TaskWeighting, WeightingArgs> {
    Registry::new("training mode")
        .register("vanilla", &["protonet"], |_: &WeightingArgs| {
            Ok(Box::new(Vanilla) as Box<dyn TaskWeighting>)
        })
        .register("multitask_spsa", &["spsa"], |a| {
            Ok(Box::new(Spsa(SpsaState::new(a.tasks, a.schedule))))
        })
        .register(
            "multitask_fixed_equal",
            &["multitask_equal", "multitask_fixed(equal)", "equal"],
            |a| Ok(Box::new(Equal(a.tasks))),
        )
        .register(
            "multitask_fixed_random",
            &["multitask_random", "multitask_fixed(random)", "random"],
            |a| Ok(Box::new(RandomWeights {
                tasks: a.tasks,
                last: vec![1.0; a.tasks],
            })),
        )
}
