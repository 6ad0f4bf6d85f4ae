//! Command-line interface: `train`, `eval`, `spsa-bench`, `gradcheck` and
//! `inspect`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{DataSource, Regime, SyntheticSpec};
use crate::embednet::{EmbeddingNetwork, NetConfig};
use crate::episodes::{ClassSampling, EpisodeSpec, TaskSampling};
use crate::error::{Error, Result};
use crate::eval::{evaluate, metrics_csv, EvalSpec};
use crate::gradcheck::{run_all, GradcheckOptions};
use crate::numerics::Checkpoint;
use crate::protocore::Distance;
use crate::spsa::bench::NoisyQuadratic;
use crate::spsa::GainSchedule;
use crate::trainer::{run_training, RunOptions, TrainConfig, CHECKPOINT_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "protospsa", version, about = "Prototypical networks with SPSA-weighted multi-task episodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an embedding network and evaluate it on the test classes.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on sampled test episodes.
    Eval(EvalArgs),
    /// SPSA on a noisy quadratic: mean squared error to the optimum.
    SpsaBench(BenchArgs),
    /// Finite-difference gradient checks in 64-bit precision.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint manifest or a CSV output.
    Inspect(InspectArgs),
}

/// Dataset selection. Omniglot is used when a root is given, otherwise a
/// synthetic dataset.
#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Omniglot root holding alphabet/character/image.png.
    #[arg(long, env = "PROTOSPSA_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Seed of the alphabet assignment to train/validation/test.
    #[arg(long)]
    split_seed: Option<u64>,
    /// within or between.
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    synthetic_train_classes: Option<usize>,
    #[arg(long)]
    synthetic_val_classes: Option<usize>,
    #[arg(long)]
    synthetic_test_classes: Option<usize>,
    #[arg(long)]
    synthetic_examples: Option<usize>,
    /// Template distance over noise scale; larger is easier.
    #[arg(long)]
    synthetic_separation: Option<f64>,
    #[arg(long)]
    synthetic_alphabet_size: Option<usize>,
    #[arg(long)]
    synthetic_seed: Option<u64>,
}

impl DataArgs {
    fn any_given(&self) -> bool {
        self.data_root.is_some()
            || self.split_seed.is_some()
            || self.regime.is_some()
            || self.synthetic_train_classes.is_some()
            || self.synthetic_val_classes.is_some()
            || self.synthetic_test_classes.is_some()
            || self.synthetic_examples.is_some()
            || self.synthetic_separation.is_some()
            || self.synthetic_alphabet_size.is_some()
            || self.synthetic_seed.is_some()
    }

    fn source(&self) -> DataSource {
        match &self.data_root {
            Some(root) => DataSource::Omniglot {
                root: root.clone(),
                split_seed: self.split_seed.unwrap_or(0),
            },
            None => {
                let d = SyntheticSpec::default();
                DataSource::Synthetic {
                    spec: SyntheticSpec {
                        train_classes: self.synthetic_train_classes.unwrap_or(d.train_classes),
                        val_classes: self.synthetic_val_classes.unwrap_or(d.val_classes),
                        test_classes: self.synthetic_test_classes.unwrap_or(d.test_classes),
                        examples_per_class: self.synthetic_examples.unwrap_or(d.examples_per_class),
                        separation: self.synthetic_separation.unwrap_or(d.separation),
                        alphabet_size: self.synthetic_alphabet_size.unwrap_or(d.alphabet_size),
                        ..d
                    },
                    seed: self.synthetic_seed.unwrap_or(0),
                }
            }
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    episodes_per_epoch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Global episodes between learning-rate halvings.
    #[arg(long, default_value_t = 2000)]
    lr_halving_interval: u64,
    /// vanilla, multitask_spsa, multitask_fixed(equal) or multitask_fixed(random).
    #[arg(long, default_value = "vanilla")]
    mode: String,
    /// Leading epochs trained as vanilla before `mode` takes over.
    #[arg(long, default_value_t = 0)]
    pretrain_epochs: usize,
    /// Support examples per class.
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Query examples per class.
    #[arg(long, default_value_t = 5)]
    queries: usize,
    /// Classes per task.
    #[arg(long, default_value_t = 5)]
    ways: usize,
    /// Tasks per episode.
    #[arg(long = "m", default_value_t = 1)]
    tasks: usize,
    /// Select the most mutually distant tasks from a random candidate pool.
    #[arg(long)]
    task_sampling: bool,
    #[arg(long, default_value_t = 30)]
    candidate_pool: usize,
    /// Tasks kept per episode with task sampling.
    #[arg(long, default_value_t = 3)]
    m_top: usize,
    /// Draw classes separately for every task instead of once per episode.
    #[arg(long)]
    per_task_classes: bool,
    /// squared_euclidean or euclidean.
    #[arg(long, default_value = "squared_euclidean")]
    distance: Distance,
    /// Task selector: auto, greedy or exhaustive.
    #[arg(long, default_value = "auto")]
    selector: String,
    /// Differentiate against the weights after this episode's SPSA step.
    #[arg(long)]
    post_update_weights: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 0.1)]
    bn_momentum: f64,
    #[arg(long, default_value_t = 1e-5)]
    bn_epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    init_gain: f64,
    #[arg(long, default_value_t = 0.25)]
    alpha0: f64,
    #[arg(long, default_value_t = 15.0)]
    beta0: f64,
    #[arg(long, default_value_t = 1.0 / 6.0)]
    gamma: f64,
    /// Validation episodes after each epoch; 0 disables.
    #[arg(long, default_value_t = 100)]
    val_episodes: usize,
    /// Normalize evaluation batches with their own statistics.
    #[arg(long)]
    bn_batch_stats_eval: bool,
    /// Test episodes evaluated after training; 0 skips.
    #[arg(long, default_value_t = 1000)]
    test_episodes: usize,
    #[arg(long, default_value = "protospsa-run")]
    out: PathBuf,
    /// Continue from the checkpoint in `out` if present.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    quiet: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            episodes_per_epoch: self.episodes_per_epoch,
            initial_lr: self.lr,
            lr_halving_interval: self.lr_halving_interval,
            mode: self.mode.clone(),
            pretrain_epochs: self.pretrain_epochs,
            episode: EpisodeSpec {
                shots: self.shots,
                queries: self.queries,
                ways: self.ways,
                tasks: self.tasks,
                task_sampling: self.task_sampling.then_some(TaskSampling {
                    candidate_pool: self.candidate_pool,
                    top: self.m_top,
                }),
                class_sampling: if self.per_task_classes {
                    ClassSampling::PerTask
                } else {
                    ClassSampling::PerEpisode
                },
            },
            regime: self.data.regime.unwrap_or_default(),
            distance: self.distance,
            selector: self.selector.clone(),
            post_update_weights: self.post_update_weights,
            seed: self.seed,
            net: NetConfig {
                channels: self.channels,
                blocks: self.blocks,
                bn_momentum: self.bn_momentum,
                bn_epsilon: self.bn_epsilon,
                init_gain: self.init_gain,
                ..Default::default()
            },
            schedule: GainSchedule {
                alpha0: self.alpha0,
                beta0: self.beta0,
                gamma: self.gamma,
            },
            val_episodes: self.val_episodes,
            bn_batch_stats_eval: self.bn_batch_stats_eval,
            data: self.data.source(),
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint manifest, or a run directory holding one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Data flags default to the `config.json` next to the checkpoint.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 5)]
    queries: usize,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value = "squared_euclidean")]
    distance: Distance,
    #[arg(long)]
    batch_stats: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append a row to this metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Label of the metrics row.
    #[arg(long, default_value = "eval")]
    label: String,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 10)]
    dim: usize,
    /// Amplitude of the uniform observation noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    #[arg(long, default_value_t = 0.25)]
    alpha0: f64,
    #[arg(long, default_value_t = 15.0)]
    beta0: f64,
    #[arg(long, default_value_t = 1.0 / 6.0)]
    gamma: f64,
    /// Write the full trajectory (n, mean squared error) here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Width of the network checked at every coordinate.
    #[arg(long, default_value_t = 8)]
    reduced_channels: usize,
    /// Coordinates sampled per tensor of the 64-channel network.
    #[arg(long, default_value_t = 16)]
    full_width_samples: usize,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Checkpoint manifest, run directory or CSV file.
    path: PathBuf,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::SpsaBench(a) => bench(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Inspect(a) => inspect(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn train(args: &TrainArgs) -> Result<i32> {
    let config = args.config();
    config.validate()?;
    let split = config.data.load(config.regime)?;
    let outcome = run_training(
        &config,
        &split,
        &RunOptions {
            out: Some(args.out.clone()),
            resume: args.resume,
            verbose: !args.quiet,
        },
    )?;
    if args.test_episodes > 0 {
        let spec = EvalSpec {
            shots: config.episode.shots,
            ways: config.episode.ways,
            queries: config.episode.queries,
            episodes: args.test_episodes,
            distance: config.distance,
            batch_stats: config.bn_batch_stats_eval,
        };
        let report = evaluate(&outcome.network, &split.test, config.regime, &spec, config.seed)?;
        println!("test {}", report.display());
        fs::write(
            args.out.join("metrics.csv"),
            metrics_csv(&[(config.mode.clone(), report)]),
        )?;
    }
    println!("outputs in {}", args.out.display());
    Ok(EXIT_OK)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn eval(args: &EvalArgs) -> Result<i32> {
    let Some(path) = &args.checkpoint else {
        return Err(Error::Config("eval needs --checkpoint".into()));
    };
    let manifest = manifest_path(path);
    let net = EmbeddingNetwork::<f32>::from_checkpoint(&Checkpoint::load(&manifest)?)?;
    let run_config = manifest.parent().map(|d| d.join("config.json")).filter(|p| p.exists());
    let (source, regime) = match run_config {
        Some(p) if !args.data.any_given() => {
            let c: TrainConfig = serde_json::from_str(&fs::read_to_string(p)?)?;
            (c.data, c.regime)
        }
        _ => (args.data.source(), args.data.regime.unwrap_or_default()),
    };
    let split = source.load(regime)?;
    let spec = EvalSpec {
        shots: args.shots,
        ways: args.ways,
        queries: args.queries,
        episodes: args.episodes,
        distance: args.distance,
        batch_stats: args.batch_stats,
    };
    let report = evaluate(&net, &split.test, regime, &spec, args.seed)?;
    println!("{}", report.display());
    if let Some(out) = &args.metrics {
        let csv = metrics_csv(&[(args.label.clone(), report)]);
        if out.exists() {
            let mut text = fs::read_to_string(out)?;
            text.push_str(csv.lines().nth(1).unwrap_or_default());
            text.push('\n');
            fs::write(out, text)?;
        } else {
            fs::write(out, csv)?;
        }
    }
    Ok(EXIT_OK)
}

fn bench(args: &BenchArgs) -> Result<i32> {
    if args.steps < 10 {
        return Err(Error::Config("spsa-bench needs at least 10 steps".into()));
    }
    let bench = NoisyQuadratic {
        dim: args.dim,
        noise: args.noise,
        steps: args.steps,
        seeds: args.seeds,
        schedule: GainSchedule {
            alpha0: args.alpha0,
            beta0: args.beta0,
            gamma: args.gamma,
        },
    };
    let report = bench.run();
    for n in [1, 10, 100, 250, 500, 1000, 2000, 5000, 10000] {
        if n <= args.steps {
            println!("n {n:>6}  mean squared error {:.6e}", report.at(n));
        }
    }
    println!(
        "ratio n={} / n=10: {:.6e}",
        args.steps,
        report.at(args.steps) / report.at(10)
    );
    if let Some(path) = &args.csv {
        let mut csv = String::from("n,mean_sq_error\n");
        for (i, v) in report.mean_sq_error.iter().enumerate() {
            let _ = writeln!(csv, "{},{v}", i + 1);
        }
        fs::write(path, csv)?;
    }
    Ok(EXIT_OK)
}

fn gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let opts = GradcheckOptions {
        seed: args.seed,
        h: args.h,
        tolerance: args.tolerance,
        reduced_channels: args.reduced_channels,
        full_width_samples: args.full_width_samples,
    };
    let reports = run_all(&opts)?;
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for r in &reports {
        let pass = r.passed(opts.tolerance);
        ok &= pass;
        worst = worst.max(r.max_rel_error);
        println!(
            "{:<4} {:<36} checked {:>4} skipped {:>3} max rel error {:.3e}",
            if pass { "ok" } else { "FAIL" },
            r.name,
            r.checked,
            r.skipped,
            r.max_rel_error
        );
    }
    println!("max relative error {worst:.3e} (tolerance {:.0e})", opts.tolerance);
    Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
}

fn inspect(args: &InspectArgs) -> Result<i32> {
    let path = manifest_path(&args.path);
    if path.extension().is_some_and(|e| e == "csv") {
        print!("{}", fs::read_to_string(&path)?);
        return Ok(EXIT_OK);
    }
    let ckpt = Checkpoint::load(&path)?;
    for (key, value) in &ckpt.meta {
        // the embedded run log is long; the CSV next to it is easier to read
        if key == "train.runlog" {
            println!("{key} = <{} bytes of JSON>", value.len());
        } else {
            println!("{key} = {value}");
        }
    }
    let mut total = 0;
    for (name, t) in &ckpt.tensors {
        let norm = t.data().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        println!("{name:<32} {:?} l2 {norm:.6}", t.shape());
        total += t.len();
    }
    println!("{} tensors, {total} values", ckpt.tensors.len());
    Ok(EXIT_OK)
}
