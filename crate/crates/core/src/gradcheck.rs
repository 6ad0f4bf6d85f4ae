//! Finite-difference gradient checks in 64-bit precision.
//!
//! Central differences with step `h`. A coordinate whose perturbation flips
//! a ReLU or a pooling switch sits on a kink where the derivative is not
//! defined; it is retried with smaller steps and skipped if the flip
//! persists. Skips are counted in the report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embednet::{EmbeddingNetwork, NetConfig};
use crate::error::Result;
use crate::numerics::ops::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, linear_backward, linear_forward,
    maxpool2d_backward, maxpool2d_forward, relu_backward, relu_forward,
};
use crate::numerics::{NormMode, NormParams, OpTrace, RunningStats, Tensor};
use crate::protocore::{episode_task_loss, task_loss_with_grad, Distance, TaskLayout};
use crate::spsa::{multitask_loss, task_loss_scales};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub h: f64,
    pub tolerance: f64,
    /// Channels of the network checked at every coordinate.
    pub reduced_channels: usize,
    /// Coordinates sampled per parameter tensor of the full-width network.
    pub full_width_samples: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            h: 1e-4,
            tolerance: 1e-3,
            reduced_channels: 8,
            full_width_samples: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`. The floor sits above the finite
/// difference round-off (about 1e-10 at h = 1e-4), which matters for conv
/// biases: batch statistics cancel them, so their true gradient is 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub const RELATIVE_FLOOR: f64 = 1e-6;

type Pattern = (Vec<bool>, Vec<usize>);

/// Core loop. `eval(coord, delta)` returns the objective with coordinate
/// `coord` shifted by `delta`, plus the kink pattern when relevant.
fn check_coords(
    name: &str,
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    base: &Option<Pattern>,
    mut eval: impl FnMut(usize, f64) -> Result<(f64, Option<Pattern>)>,
) -> Result<CheckReport> {
    let mut report = CheckReport {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    'coords: for &c in coords {
        let mut step = h;
        for _ in 0..3 {
            let (fp, pp) = eval(c, step)?;
            let (fm, pm) = eval(c, -step)?;
            if pp != *base || pm != *base {
                step /= 10.0;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic[c], numeric));
            report.checked += 1;
            continue 'coords;
        }
        report.skipped += 1;
    }
    Ok(report)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Checks `loss = <r, op(inputs)>` against the analytic gradient of every
/// input tensor.
fn op_suite(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    h: f64,
    forward: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    grads: impl Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CheckReport>> {
    let out = forward(&inputs)?;
    let r = random_tensor(out.shape(), rng);
    let analytic = grads(&inputs, &r)?;
    let mut reports = Vec::new();
    for (i, g) in analytic.iter().enumerate() {
        let mut work = inputs.clone();
        let rep = check_coords(&format!("{name}[{i}]"), g.data(), &all(g.len()), h, &None, |c, d| {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + d;
            let v = dot(&forward(&work)?, &r);
            work[i].data_mut()[c] = orig;
            Ok((v, None))
        })?;
        reports.push(rep);
    }
    Ok(reports)
}

/// Per-operator suites at every coordinate.
pub fn layer_suites(opts: &GradcheckOptions) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.h;
    let mut reports = Vec::new();

    let conv_in = vec![
        random_tensor(&[2, 3, 5, 5], &mut rng),
        random_tensor(&[4, 3, 3, 3], &mut rng),
        random_tensor(&[4], &mut rng),
    ];
    reports.extend(op_suite(
        "conv2d",
        conv_in,
        h,
        |t| conv2d_forward(&t[0], &t[1], &t[2]),
        |t, g| {
            let c = conv2d_backward(&t[0], &t[1], g)?;
            Ok(vec![c.input, c.weight, c.bias])
        },
        &mut rng,
    )?);

    let norm = NormParams::default();
    let bn_in = vec![
        random_tensor(&[4, 2, 3, 3], &mut rng),
        random_tensor(&[2], &mut rng),
        random_tensor(&[2], &mut rng),
    ];
    reports.extend(op_suite(
        "batchnorm",
        bn_in,
        h,
        |t| {
            let mut rs = RunningStats::fresh(2)?;
            Ok(batchnorm_forward(&t[0], &t[1], &t[2], NormMode::BatchStats, &mut rs, norm)?.0)
        },
        |t, g| {
            let mut rs = RunningStats::fresh(2)?;
            let (_, cache) = batchnorm_forward(&t[0], &t[1], &t[2], NormMode::BatchStats, &mut rs, norm)?;
            let ng = batchnorm_backward(&cache, &t[1], g)?;
            Ok(vec![ng.input, ng.gamma, ng.beta])
        },
        &mut rng,
    )?);

    // keep inputs away from the kink at 0
    let relu_in = Tensor::from_fn(&[3, 7], |i| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if i % 2 == 0 {
            v
        } else {
            -v
        }
    })?;
    reports.extend(op_suite(
        "relu",
        vec![relu_in],
        h,
        |t| Ok(relu_forward(&t[0])),
        |t, g| Ok(vec![relu_backward(&t[0], g)?]),
        &mut rng,
    )?);

    // distinct, well-separated values so no perturbation changes an argmax
    let mut values: Vec<f64> = (0..72).map(|i| i as f64 * 0.01).collect();
    rand::seq::SliceRandom::shuffle(values.as_mut_slice(), &mut rng);
    let pool_in = Tensor::new(&[2, 1, 6, 6], values)?;
    reports.extend(op_suite(
        "maxpool2d",
        vec![pool_in],
        h,
        |t| Ok(maxpool2d_forward(&t[0])?.0),
        |t, g| {
            let (_, argmax) = maxpool2d_forward(&t[0])?;
            Ok(vec![maxpool2d_backward(t[0].shape(), &argmax, g)?])
        },
        &mut rng,
    )?);

    let lin_in = vec![
        random_tensor(&[2, 3], &mut rng),
        random_tensor(&[4, 3], &mut rng),
        random_tensor(&[4], &mut rng),
    ];
    reports.extend(op_suite(
        "linear",
        lin_in,
        h,
        |t| linear_forward(&t[0], &t[1], &t[2]),
        |t, g| {
            let l = linear_backward(&t[0], &t[1], g)?;
            Ok(vec![l.input, l.weight, l.bias])
        },
        &mut rng,
    )?);

    let layout = TaskLayout {
        ways: 3,
        shots: 2,
        queries: 2,
    };
    for distance in [Distance::SquaredEuclidean, Distance::Euclidean] {
        let mut emb = random_tensor(&[layout.batch_size(), 5], &mut rng);
        let (_, g) = task_loss_with_grad(&emb, layout, distance)?;
        let rep = check_coords(
            &format!("prototype loss ({distance})"),
            g.data(),
            &all(g.len()),
            h,
            &None,
            |c, d| {
                let orig = emb.data()[c];
                emb.data_mut()[c] = orig + d;
                let v = episode_task_loss(&emb, layout, distance)?.task_loss;
                emb.data_mut()[c] = orig;
                Ok((v, None))
            },
        )?;
        reports.push(rep);
    }
    Ok(reports)
}

/// A fixed micro-episode: `M` tasks of 2-way 1-shot with one query each.
struct MicroEpisode {
    batches: Vec<Tensor<f64>>,
    weights: Vec<f64>,
    layout: TaskLayout,
}

impl MicroEpisode {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let layout = TaskLayout {
            ways: 2,
            shots: 1,
            queries: 1,
        };
        let batches = (0..2)
            .map(|_| Tensor::from_fn(&[layout.batch_size(), 1, 28, 28], |_| rng.gen_range(0.0..1.0)).unwrap())
            .collect();
        Self {
            batches,
            weights: vec![0.7, 1.3],
            layout,
        }
    }

    fn objective(&self, net: &mut EmbeddingNetwork<f64>) -> Result<(f64, Pattern)> {
        let mut losses = Vec::new();
        let mut pattern: Pattern = (Vec::new(), Vec::new());
        for b in &self.batches {
            let mut trace = OpTrace::disabled().with_patterns();
            let emb = net.forward(b, NormMode::BatchStats, &mut trace)?;
            losses.push(episode_task_loss(&emb, self.layout, Distance::SquaredEuclidean)?.task_loss);
            let (relu, pool) = trace.patterns().unwrap();
            pattern.0.extend_from_slice(relu);
            pattern.1.extend_from_slice(pool);
        }
        Ok((multitask_loss(&losses, &self.weights)?, pattern))
    }

    fn gradient(&self, net: &mut EmbeddingNetwork<f64>) -> Result<Vec<f64>> {
        net.zero_grads();
        for (b, s) in self.batches.iter().zip(task_loss_scales(&self.weights)) {
            let mut trace = OpTrace::new();
            let emb = net.forward(b, NormMode::BatchStats, &mut trace)?;
            let (_, mut g) = task_loss_with_grad(&emb, self.layout, Distance::SquaredEuclidean)?;
            g.scale_in_place(s);
            net.backward(&mut trace, g)?;
        }
        Ok(net.params().slots().iter().flat_map(|s| s.grad.data().to_vec()).collect())
    }
}

/// The composed objective embed -> prototypes -> task loss -> weighted
/// multi-task loss, per parameter tensor. `sample` limits the coordinates
/// checked per tensor.
pub fn network_suite(channels: usize, sample: Option<usize>, opts: &GradcheckOptions) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ channels as u64);
    let config = NetConfig {
        channels,
        ..Default::default()
    };
    let mut net = EmbeddingNetwork::<f32>::init(config, opts.seed)?.cast::<f64>();
    let episode = MicroEpisode::new(&mut rng);
    let analytic = episode.gradient(&mut net)?;
    let (_, base) = episode.objective(&mut net)?;
    let base = Some(base);

    let sizes: Vec<(String, usize)> = net
        .params()
        .iter()
        .map(|(n, s)| (n.to_string(), s.value.len()))
        .collect();
    let mut offset = 0;
    let mut reports = Vec::new();
    for (slot, (name, len)) in sizes.iter().enumerate() {
        let mut coords: Vec<usize> = (0..*len).collect();
        if let Some(k) = sample.filter(|&k| k < *len) {
            coords = rand::seq::index::sample(&mut rng, *len, k).into_vec();
            coords.sort_unstable();
        }
        let coords: Vec<usize> = coords.into_iter().map(|c| c + offset).collect();
        let start = offset;
        let rep = check_coords(
            &format!("network c{channels} {name}"),
            &analytic,
            &coords,
            opts.h,
            &base,
            |c, d| {
                let value = &mut net.params_mut().slots_mut()[slot].value;
                let orig = value.data()[c - start];
                value.data_mut()[c - start] = orig + d;
                let out = episode.objective(&mut net);
                net.params_mut().slots_mut()[slot].value.data_mut()[c - start] = orig;
                let (v, p) = out?;
                Ok((v, Some(p)))
            },
        )?;
        reports.push(rep);
        offset += len;
    }
    Ok(reports)
}

/// Layer suites, the reduced-width network at every coordinate and the
/// full-width network at sampled coordinates.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<CheckReport>> {
    let mut reports = layer_suites(opts)?;
    reports.extend(network_suite(opts.reduced_channels, None, opts)?);
    reports.extend(network_suite(64, Some(opts.full_width_samples), opts)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
        assert!(relative_error(1e-12, -1e-12) < 1e-4);
    }

    #[test]
    fn layer_suites_pass() {
        let opts = GradcheckOptions::default();
        for r in layer_suites(&opts).unwrap() {
            // isolated linear and conv ops are held to a tighter bound
            let tol = if r.name.starts_with("linear") || r.name.starts_with("conv") {
                1e-5
            } else {
                opts.tolerance
            };
            assert!(r.passed(tol), "{r:?}");
            assert_eq!(r.skipped, 0);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let analytic = [2.0, 0.0];
        let rep = check_coords("x^2", &analytic, &[0, 1], 1e-4, &None, |c, d| {
            let x = [1.0, 3.0];
            let v: f64 = (0..2).map(|i| (x[i] + if i == c { d } else { 0.0 }).powi(2)).sum();
            Ok((v, None))
        })
        .unwrap();
        assert_eq!(rep.checked, 2);
        assert!(rep.max_rel_error > 0.5);
    }

    #[test]
    fn kinks_are_skipped() {
        let rep = check_coords("relu", &[0.5], &[0], 1e-4, &Some((vec![true], vec![])), |_, d| {
            Ok((d.max(0.0), Some((vec![d > 0.0], vec![]))))
        })
        .unwrap();
        assert_eq!((rep.checked, rep.skipped), (0, 1));
    }
}
