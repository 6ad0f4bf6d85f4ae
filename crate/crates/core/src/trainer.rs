//! Episodic training: single-task prototypical episodes and weighted
//! multi-task episodes, learning-rate schedule, pretraining switch,
//! per-epoch checkpoints and resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataSource, DatasetSplit, Regime, SyntheticSpec};
use crate::embednet::{EmbeddingNetwork, NetConfig};
use crate::episodes::{select_diverse_tasks, selectors, EpisodeSampler, EpisodeSpec, Task, TaskSelector};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSpec};
use crate::numerics::{Adam, Checkpoint, NormMode, OpTrace, Tensor};
use crate::protocore::{prototypes_from_batch, task_loss_with_grad, Distance};
use crate::spsa::{multitask_loss, task_loss_scales, GainSchedule};
use crate::weighting::{weightings, TaskWeighting, Vanilla, WeightingArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub initial_lr: f64,
    /// The learning rate halves every this many global episodes.
    pub lr_halving_interval: u64,
    pub mode: String,
    /// Leading epochs trained as single-task episodes before `mode` starts.
    pub pretrain_epochs: usize,
    pub episode: EpisodeSpec,
    pub regime: Regime,
    pub distance: Distance,
    pub selector: String,
    /// Differentiate the multi-task loss against the weights after this
    /// episode's update instead of before it.
    pub post_update_weights: bool,
    pub seed: u64,
    pub net: NetConfig,
    pub schedule: GainSchedule,
    /// Validation episodes per epoch; 0 disables validation.
    pub val_episodes: usize,
    pub bn_batch_stats_eval: bool,
    pub data: DataSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            episodes_per_epoch: 100,
            initial_lr: 1e-3,
            lr_halving_interval: 2000,
            mode: "vanilla".into(),
            pretrain_epochs: 0,
            episode: EpisodeSpec::default(),
            regime: Regime::BetweenAlphabet,
            distance: Distance::SquaredEuclidean,
            selector: "auto".into(),
            post_update_weights: false,
            seed: 0,
            net: NetConfig::default(),
            schedule: GainSchedule::default(),
            val_episodes: 100,
            bn_batch_stats_eval: false,
            data: DataSource::Synthetic {
                spec: SyntheticSpec::default(),
                seed: 0,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs as u64),
            ("episodes_per_epoch", self.episodes_per_epoch as u64),
            ("lr_halving_interval", self.lr_halving_interval),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::InvalidHyperparameter {
                name: "initial_lr",
                value: self.initial_lr,
            });
        }
        if self.pretrain_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "pretrain_epochs ({}) must be below epochs ({})",
                self.pretrain_epochs, self.epochs
            )));
        }
        self.episode.validate()?;
        self.net.validate()?;
        weightings().resolve(&self.mode)?;
        selectors().resolve(&self.selector)?;
        Ok(())
    }

    /// `initial_lr * 2^-(floor(episode / interval))` for the 0-based global episode.
    pub fn learning_rate(&self, global_episode: u64) -> f64 {
        let halvings = (global_episode / self.lr_halving_interval).min(1074) as i32;
        self.initial_lr * 2f64.powi(-halvings)
    }

    /// SHA-256 of the canonical JSON form, hex-encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}

/// Per-episode RNG stream; one stream per epoch keeps resumed runs identical.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

fn validation_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

struct TaskPass {
    loss: f64,
    trace: OpTrace<f32>,
    grad: Tensor<f32>,
}

fn forward_task(
    net: &mut EmbeddingNetwork<f32>,
    task: &Task,
    classes: &[crate::data::ClassRecord],
    distance: Distance,
) -> Result<TaskPass> {
    let batch = task.batch(classes)?;
    let mut trace = OpTrace::new();
    let emb = net.forward(&batch, NormMode::Train, &mut trace)?;
    let (breakdown, grad) = task_loss_with_grad(&emb, task.layout(), distance)?;
    Ok(TaskPass {
        loss: breakdown.task_loss as f64,
        trace,
        grad,
    })
}

fn backward_scaled(net: &mut EmbeddingNetwork<f32>, mut pass: TaskPass, scale: f64) -> Result<()> {
    if scale != 1.0 {
        pass.grad.scale_in_place(scale as f32);
    }
    net.backward(&mut pass.trace, pass.grad)?;
    Ok(())
}

fn apply_update(net: &mut EmbeddingNetwork<f32>, adam: &Adam, lr: f64) -> Result<()> {
    if lr > 0.0 {
        adam.step(net.params_mut(), lr)?;
    }
    Ok(())
}

/// One Adam step on the loss of a single task. Returns the task loss.
pub fn train_episode_vanilla(
    net: &mut EmbeddingNetwork<f32>,
    adam: &Adam,
    task: &Task,
    classes: &[crate::data::ClassRecord],
    distance: Distance,
    lr: f64,
) -> Result<f64> {
    net.zero_grads();
    let pass = forward_task(net, task, classes, distance)?;
    let loss = pass.loss;
    backward_scaled(net, pass, 1.0)?;
    apply_update(net, adam, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskStep {
    pub objective: f64,
    pub task_losses: Vec<f64>,
    /// Weights the network gradient was formed with.
    pub weights: Vec<f64>,
}

/// Task losses, one weight update and one Adam step on the weighted loss.
#[allow(clippy::too_many_arguments)]
pub fn train_episode_multitask(
    net: &mut EmbeddingNetwork<f32>,
    adam: &Adam,
    tasks: &[Task],
    classes: &[crate::data::ClassRecord],
    distance: Distance,
    lr: f64,
    weighting: &mut dyn TaskWeighting,
    rng: &mut ChaCha8Rng,
    post_update_weights: bool,
) -> Result<MultitaskStep> {
    net.zero_grads();
    let pre = weighting.episode_weights(rng);
    if pre.len() != tasks.len() {
        return Err(Error::ShapeMismatch {
            op: "train_episode_multitask",
            dim: "task weights",
            expected: tasks.len(),
            actual: pre.len(),
        });
    }
    let mut task_losses = Vec::with_capacity(tasks.len());
    let weights = if post_update_weights {
        let passes = tasks
            .iter()
            .map(|t| forward_task(net, t, classes, distance))
            .collect::<Result<Vec<_>>>()?;
        task_losses.extend(passes.iter().map(|p| p.loss));
        weighting.observe(&task_losses, rng)?;
        let post = weighting.current();
        for (pass, s) in passes.into_iter().zip(task_loss_scales(&post)) {
            backward_scaled(net, pass, s)?;
        }
        post
    } else {
        // backward right away so only one trace is alive at a time
        for (t, s) in tasks.iter().zip(task_loss_scales(&pre)) {
            let pass = forward_task(net, t, classes, distance)?;
            task_losses.push(pass.loss);
            backward_scaled(net, pass, s)?;
        }
        weighting.observe(&task_losses, rng)?;
        pre
    };
    let objective = multitask_loss(&task_losses, &weights)?;
    apply_update(net, adam, lr)?;
    Ok(MultitaskStep {
        objective,
        task_losses,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: String,
    /// Mean training objective over the epoch's episodes.
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_ci95: Option<f64>,
    /// Learning rate of the epoch's last episode.
    pub lr: f64,
    /// Task weights at the end of the epoch.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch of this process; kept out of the CSV so
    /// that logs of identical runs compare equal byte for byte.
    #[serde(skip)]
    pub seconds: Vec<(usize, f64)>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunLog {
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,mode,train_loss,val_accuracy,val_ci95,lr,seed,config_hash\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.mode,
                r.train_loss,
                opt(r.val_accuracy),
                opt(r.val_ci95),
                r.lr,
                self.seed,
                self.config_hash
            );
        }
        out
    }

    /// Weight trajectory as `epoch,task,value` rows.
    pub fn weights_csv(&self) -> String {
        let mut out = String::from("epoch,task,value\n");
        for r in &self.records {
            for (i, w) in r.weights.iter().enumerate() {
                let _ = writeln!(out, "{},{i},{w}", r.epoch);
            }
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,seconds\n");
        for (e, s) in &self.seconds {
            let _ = writeln!(out, "{e},{s:.3}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub record: EpochRecord,
    /// Training objective of every episode, in order.
    pub episode_losses: Vec<f64>,
}

/// Owns the network, optimizer and weighting strategy of one run.
pub struct Trainer<'a> {
    config: TrainConfig,
    split: &'a DatasetSplit,
    net: EmbeddingNetwork<f32>,
    adam: Adam,
    weighting: Box<dyn TaskWeighting>,
    selector: Box<dyn TaskSelector>,
    sampler: EpisodeSampler<'a>,
    single: EpisodeSampler<'a>,
    epoch: usize,
    global_episode: u64,
    log: RunLog,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, split: &'a DatasetSplit) -> Result<Self> {
        config.validate()?;
        let net = EmbeddingNetwork::init(config.net, config.seed)?;
        let sampler = EpisodeSampler::new(&split.train, config.episode, config.regime)?;
        let single_spec = EpisodeSpec {
            tasks: 1,
            task_sampling: None,
            ..config.episode
        };
        let single = EpisodeSampler::new(&split.train, single_spec, config.regime)?;
        let selector = selectors().create(&config.selector, &())?;
        let log = RunLog {
            seed: config.seed,
            config_hash: config.hash(),
            records: Vec::new(),
            seconds: Vec::new(),
        };
        let mut trainer = Self {
            weighting: Box::new(Vanilla),
            config,
            split,
            net,
            adam: Adam::default(),
            selector,
            sampler,
            single,
            epoch: 0,
            global_episode: 0,
            log,
        };
        trainer.weighting = trainer.weighting_for(0)?;
        Ok(trainer)
    }

    fn weighting_for(&self, epoch: usize) -> Result<Box<dyn TaskWeighting>> {
        if epoch < self.config.pretrain_epochs {
            return Ok(Box::new(Vanilla));
        }
        weightings().create(
            &self.config.mode,
            &WeightingArgs {
                tasks: self.config.episode.episode_tasks(),
                schedule: self.config.schedule,
            },
        )
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &EmbeddingNetwork<f32> {
        &self.net
    }

    pub fn into_network(self) -> EmbeddingNetwork<f32> {
        self.net
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn weighting(&self) -> &dyn TaskWeighting {
        self.weighting.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Tasks for one multi-task episode, after optional diversity selection
    /// on eval-mode prototypes.
    fn episode_tasks(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<Task>> {
        let episode = self.sampler.sample_episode(rng);
        let Some(ts) = self.config.episode.task_sampling else {
            return Ok(episode.tasks);
        };
        let classes = &self.split.train;
        let protos = episode
            .tasks
            .iter()
            .map(|t| {
                let emb = self.net.embed(&t.support_batch(classes)?, NormMode::Eval)?;
                let layout = crate::protocore::TaskLayout {
                    queries: 0,
                    ..t.layout()
                };
                prototypes_from_batch(&emb, layout)
            })
            .collect::<Result<Vec<_>>>()?;
        let keep = select_diverse_tasks(&protos, ts.top, self.selector.as_ref())?;
        let mut tasks: Vec<Option<Task>> = episode.tasks.into_iter().map(Some).collect();
        Ok(keep.into_iter().map(|i| tasks[i].take().unwrap()).collect())
    }

    /// Runs the next epoch. Validation and checkpointing are left to the caller.
    pub fn train_epoch(&mut self) -> Result<EpochSummary> {
        if self.is_finished() {
            return Err(Error::Config("training already finished".into()));
        }
        let epoch = self.epoch;
        if epoch == self.config.pretrain_epochs && self.config.pretrain_epochs > 0 {
            // fresh strategy: the weight recursion starts at n = 1 here
            self.weighting = self.weighting_for(epoch)?;
        }
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut losses = Vec::with_capacity(self.config.episodes_per_epoch);
        let mut lr = self.config.learning_rate(self.global_episode);
        let classes = &self.split.train;
        for _ in 0..self.config.episodes_per_epoch {
            lr = self.config.learning_rate(self.global_episode);
            let loss = if self.weighting.single_task() {
                let task = self.single.sample_task(&mut rng);
                train_episode_vanilla(&mut self.net, &self.adam, &task, classes, self.config.distance, lr)?
            } else {
                let tasks = self.episode_tasks(&mut rng)?;
                train_episode_multitask(
                    &mut self.net,
                    &self.adam,
                    &tasks,
                    classes,
                    self.config.distance,
                    lr,
                    self.weighting.as_mut(),
                    &mut rng,
                    self.config.post_update_weights,
                )?
                .objective
            };
            if !loss.is_finite() {
                return Err(Error::Config(format!(
                    "training objective became non-finite at episode {}",
                    self.global_episode
                )));
            }
            losses.push(loss);
            self.global_episode += 1;
        }
        let record = EpochRecord {
            epoch,
            mode: self.weighting.name().to_string(),
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_accuracy: None,
            val_ci95: None,
            lr,
            weights: self.weighting.current(),
        };
        self.epoch += 1;
        Ok(EpochSummary {
            record,
            episode_losses: losses,
        })
    }

    fn eval_spec(&self, episodes: usize) -> EvalSpec {
        EvalSpec {
            shots: self.config.episode.shots,
            ways: self.config.episode.ways,
            queries: self.config.episode.queries,
            episodes,
            distance: self.config.distance,
            batch_stats: self.config.bn_batch_stats_eval,
        }
    }

    /// Validation accuracy and interval, or `None` when the validation
    /// split cannot host the episode spec.
    pub fn validate(&self) -> Result<Option<(f64, f64)>> {
        let classes = &self.split.validation;
        let spec = self.eval_spec(self.config.val_episodes);
        if self.config.val_episodes == 0 {
            return Ok(None);
        }
        let episode = EpisodeSpec {
            shots: spec.shots,
            ways: spec.ways,
            queries: spec.queries,
            ..Default::default()
        };
        if episode.check_against(classes, self.config.regime).is_err() {
            return Ok(None);
        }
        let r = evaluate(&self.net, classes, self.config.regime, &spec, validation_seed(self.config.seed))?;
        Ok(Some((r.mean_accuracy, r.ci95)))
    }

    /// Trains one epoch, validates and appends the record to the log.
    pub fn step_epoch(&mut self) -> Result<EpochSummary> {
        let start = Instant::now();
        let mut summary = self.train_epoch()?;
        if let Some((acc, ci)) = self.validate()? {
            summary.record.val_accuracy = Some(acc);
            summary.record.val_ci95 = Some(ci);
        }
        self.log.records.push(summary.record.clone());
        self.log.seconds.push((summary.record.epoch, start.elapsed().as_secs_f64()));
        Ok(summary)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.net.to_checkpoint();
        ckpt.set_meta("train.config_hash", &self.log.config_hash);
        ckpt.set_meta("train.epochs_done", self.epoch);
        ckpt.set_meta("train.global_episode", self.global_episode);
        ckpt.set_meta("train.active_mode", self.weighting.name());
        ckpt.set_meta("train.runlog", serde_json::to_string(&self.log.records)?);
        self.weighting.save(&mut ckpt);
        Ok(ckpt)
    }

    /// Restores network, optimizer moments, weights and log from a
    /// checkpoint written by the same configuration.
    pub fn resume_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let hash = ckpt.meta("train.config_hash")?;
        if hash != self.log.config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written by config {hash}, this run is {}",
                self.log.config_hash
            )));
        }
        self.net = EmbeddingNetwork::from_checkpoint(ckpt)?;
        self.epoch = ckpt.meta_parsed("train.epochs_done")?;
        self.global_episode = ckpt.meta_parsed("train.global_episode")?;
        self.log.records = serde_json::from_str(ckpt.meta("train.runlog")?)?;
        // the strategy of the last completed epoch; the pretraining switch
        // itself happens when the next epoch starts
        self.weighting = self.weighting_for(self.epoch.saturating_sub(1))?;
        let active = ckpt.meta("train.active_mode")?;
        if active != self.weighting.name() {
            return Err(Error::Checkpoint(format!(
                "checkpoint mode `{active}` does not match `{}`",
                self.weighting.name()
            )));
        }
        self.weighting.restore(ckpt)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub resume: bool,
    pub verbose: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub network: EmbeddingNetwork<f32>,
}

fn write_outputs(dir: &Path, trainer: &Trainer<'_>) -> Result<()> {
    let log = trainer.log();
    fs::write(dir.join("runlog.csv"), log.csv())?;
    fs::write(dir.join("weights.csv"), log.weights_csv())?;
    fs::write(dir.join("timing.csv"), log.timing_csv())?;
    trainer.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))
}

/// Runs the whole schedule, checkpointing after every epoch when an output
/// directory is given.
pub fn run_training(config: &TrainConfig, split: &DatasetSplit, options: &RunOptions) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), split)?;
    if let Some(dir) = &options.out {
        fs::create_dir_all(dir)?;
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        if options.resume && ckpt_path.exists() {
            trainer.resume_from(&Checkpoint::load(&ckpt_path)?)?;
        }
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
        fs::write(dir.join("config.sha256"), trainer.log().config_hash.clone() + "\n")?;
    }
    while !trainer.is_finished() {
        let summary = trainer.step_epoch()?;
        if options.verbose {
            let r = &summary.record;
            eprintln!(
                "epoch {:>3} {:<22} loss {:.4} val {} lr {:.2e}",
                r.epoch,
                r.mode,
                r.train_loss,
                r.val_accuracy.map_or("-".into(), |a| format!("{:.4}", a)),
                r.lr
            );
        }
        if let Some(dir) = &options.out {
            write_outputs(dir, &trainer)?;
        }
    }
    let log = trainer.log().clone();
    Ok(TrainOutcome {
        log,
        network: trainer.into_network(),
    })
}
