//! The four-block convolutional embedding network.
//!
//! Each block is conv 3x3 (padding 1) -> batch norm -> ReLU -> 2x2 max-pool.
//! On `1x28x28` inputs the spatial extent runs 28 -> 14 -> 7 -> 3 -> 1 and the
//! flattened embedding has `channels` (64) entries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    Checkpoint, NormMode, NormParams, OpTrace, ParamId, ParamStore, RunningStats, Scalar, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    pub input_size: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    /// Weights and biases are drawn from `U(-g/sqrt(fan_in), g/sqrt(fan_in))`.
    pub init_gain: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: 64,
            blocks: 4,
            input_size: 28,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
            init_gain: 1.0,
        }
    }
}

impl NetConfig {
    /// Spatial extent after each block, starting with the input.
    pub fn spatial_progression(&self) -> Vec<usize> {
        std::iter::successors(Some(self.input_size), |&s| Some(s / 2))
            .take(self.blocks + 1)
            .collect()
    }

    pub fn embedding_dim(&self) -> usize {
        let last = *self.spatial_progression().last().unwrap();
        self.channels * last * last
    }

    /// Scalar parameter count from the layer shapes.
    pub fn parameter_count(&self) -> usize {
        (0..self.blocks)
            .map(|i| {
                let cin = if i == 0 { self.in_channels } else { self.channels };
                cin * self.channels * 9 + self.channels + 2 * self.channels
            })
            .sum()
    }

    fn norm(&self) -> NormParams {
        NormParams {
            momentum: self.bn_momentum,
            epsilon: self.bn_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 || self.blocks == 0 {
            return Err(Error::Config("network extents must be positive".into()));
        }
        if self.spatial_progression().contains(&0)
            || self.spatial_progression()[..self.blocks].iter().any(|&s| s < 2)
        {
            return Err(Error::Config(format!(
                "input size {} is too small for {} pooling blocks",
                self.input_size, self.blocks
            )));
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("batch norm epsilon/momentum out of range".into()));
        }
        Ok(())
    }

    fn write_meta(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("net.in_channels", self.in_channels);
        ckpt.set_meta("net.channels", self.channels);
        ckpt.set_meta("net.blocks", self.blocks);
        ckpt.set_meta("net.input_size", self.input_size);
        ckpt.set_meta("net.bn_momentum", self.bn_momentum);
        ckpt.set_meta("net.bn_epsilon", self.bn_epsilon);
        ckpt.set_meta("net.init_gain", self.init_gain);
    }

    fn read_meta(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            in_channels: ckpt.meta_parsed("net.in_channels")?,
            channels: ckpt.meta_parsed("net.channels")?,
            blocks: ckpt.meta_parsed("net.blocks")?,
            input_size: ckpt.meta_parsed("net.input_size")?,
            bn_momentum: ckpt.meta_parsed("net.bn_momentum")?,
            bn_epsilon: ckpt.meta_parsed("net.bn_epsilon")?,
            init_gain: ckpt.meta_parsed("net.init_gain")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockParams {
    conv_weight: ParamId,
    conv_bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNetwork<T> {
    config: NetConfig,
    params: ParamStore<T>,
    blocks: Vec<BlockParams>,
    running: Vec<RunningStats<T>>,
}

impl<T: Scalar> EmbeddingNetwork<T> {
    /// Reproducible initialization from `seed`.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut running = Vec::with_capacity(config.blocks);
        let c = config.channels;
        for i in 0..config.blocks {
            let cin = if i == 0 { config.in_channels } else { c };
            let bound = config.init_gain / ((cin * 9) as f64).sqrt();
            let mut uniform = |shape: &[usize]| {
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            };
            let conv_weight = params.register(format!("block{i}.conv.weight"), uniform(&[c, cin, 3, 3])?);
            let conv_bias = params.register(format!("block{i}.conv.bias"), uniform(&[c])?);
            let gamma = params.register(format!("block{i}.bn.gamma"), Tensor::full(&[c], T::one())?);
            let beta = params.register(format!("block{i}.bn.beta"), Tensor::zeros(&[c])?);
            blocks.push(BlockParams {
                conv_weight,
                conv_bias,
                gamma,
                beta,
            });
            running.push(RunningStats::fresh(c)?);
        }
        Ok(Self {
            config,
            params,
            blocks,
            running,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<usize> {
        let [b, c, h, w] = batch.dims4("embed")?;
        let cfg = &self.config;
        for (dim, expected, actual) in [
            ("input channels", cfg.in_channels, c),
            ("input height", cfg.input_size, h),
            ("input width", cfg.input_size, w),
        ] {
            if expected != actual {
                return Err(Error::ShapeMismatch {
                    op: "embed",
                    dim,
                    expected,
                    actual,
                });
            }
        }
        Ok(b)
    }

    /// Forward pass recording into `trace`. Returns `[B, embedding_dim]`.
    ///
    /// `running` is updated only in [`NormMode::Train`].
    fn run(
        &self,
        running: &mut [RunningStats<T>],
        batch: &Tensor<T>,
        mode: NormMode,
        trace: &mut OpTrace<T>,
    ) -> Result<Tensor<T>> {
        let b = self.check_input(batch)?;
        let progression = self.config.spatial_progression();
        let norm = self.config.norm();
        let mut x = batch.clone();
        for (i, (block, stats)) in self.blocks.iter().zip(running.iter_mut()).enumerate() {
            x = trace.conv2d(&self.params, x, block.conv_weight, block.conv_bias)?;
            x = trace.batchnorm(&self.params, stats, x, block.gamma, block.beta, mode, norm)?;
            x = trace.relu(x);
            x = trace.maxpool2d(x)?;
            let s = progression[i + 1];
            assert_eq!(x.shape(), &[b, self.config.channels, s, s]);
        }
        trace.reshape(x, &[b, self.config.embedding_dim()])
    }

    /// Traced forward pass for training. Batch-norm running statistics are
    /// updated when `mode` is [`NormMode::Train`].
    pub fn forward(
        &mut self,
        batch: &Tensor<T>,
        mode: NormMode,
        trace: &mut OpTrace<T>,
    ) -> Result<Tensor<T>> {
        let mut running = std::mem::take(&mut self.running);
        let out = self.run(&mut running, batch, mode, trace);
        self.running = running;
        out
    }

    /// Untraced forward pass that never mutates the network.
    ///
    /// `Train` is treated as `BatchStats` here.
    pub fn embed(&self, batch: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let mode = match mode {
            NormMode::Train => NormMode::BatchStats,
            m => m,
        };
        let mut running = self.running.clone();
        self.run(&mut running, batch, mode, &mut OpTrace::disabled())
    }

    /// Accumulates parameter gradients for a traced forward pass.
    pub fn backward(&mut self, trace: &mut OpTrace<T>, output_grad: Tensor<T>) -> Result<Tensor<T>> {
        trace.backward(&mut self.params, output_grad)
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
    }

    /// Serializes parameters, optimizer moments, step counters, running
    /// statistics and the network configuration.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.config.write_meta(&mut ckpt);
        for (name, slot) in self.params.iter() {
            ckpt.push(name, slot.value.cast());
            ckpt.push(format!("{name}.adam_m"), slot.first_moment.cast());
            ckpt.push(format!("{name}.adam_v"), slot.second_moment.cast());
            ckpt.set_meta(format!("step.{name}"), slot.step);
        }
        for (i, stats) in self.running.iter().enumerate() {
            ckpt.push(format!("block{i}.bn.running_mean"), stats.mean.cast());
            ckpt.push(format!("block{i}.bn.running_var"), stats.var.cast());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = NetConfig::read_meta(ckpt)?;
        let mut net = Self::init(config, 0)?;
        let names: Vec<String> = net.params.names().to_vec();
        for (name, slot) in names.iter().zip(net.params.slots_mut()) {
            let restore = |key: &str, into: &mut Tensor<T>| -> Result<()> {
                let t = ckpt.tensor(key)?;
                if t.shape() != into.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{key}` has shape {:?}, expected {:?}",
                        t.shape(),
                        into.shape()
                    )));
                }
                *into = t.cast();
                Ok(())
            };
            restore(name, &mut slot.value)?;
            restore(&format!("{name}.adam_m"), &mut slot.first_moment)?;
            restore(&format!("{name}.adam_v"), &mut slot.second_moment)?;
            slot.step = ckpt.meta_parsed(&format!("step.{name}"))?;
        }
        for (i, stats) in net.running.iter_mut().enumerate() {
            stats.mean = ckpt.tensor(&format!("block{i}.bn.running_mean"))?.cast();
            stats.var = ckpt.tensor(&format!("block{i}.bn.running_var"))?.cast();
        }
        Ok(net)
    }

    /// Same network in another precision (gradients and moments reset).
    pub fn cast<U: Scalar>(&self) -> EmbeddingNetwork<U> {
        let mut params = ParamStore::new();
        for (name, slot) in self.params.iter() {
            params.register(name, slot.value.cast());
        }
        EmbeddingNetwork {
            config: self.config,
            params,
            blocks: self.blocks.clone(),
            running: self
                .running
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.cast(),
                    var: s.var.cast(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes_oracle(cfg: &NetConfig) -> usize {
        // sum of the element counts of every registered tensor shape
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        for i in 0..cfg.blocks {
            let cin = if i == 0 { cfg.in_channels } else { cfg.channels };
            shapes.push(vec![cfg.channels, cin, 3, 3]);
            shapes.push(vec![cfg.channels]);
            shapes.push(vec![cfg.channels]);
            shapes.push(vec![cfg.channels]);
        }
        shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    #[test]
    fn parameter_count_matches_layer_shapes() {
        let cfg = NetConfig::default();
        let net = EmbeddingNetwork::<f32>::init(cfg, 1).unwrap();
        assert_eq!(shapes_oracle(&cfg), 111_936);
        assert_eq!(net.params().numel(), 111_936);
        assert_eq!(cfg.parameter_count(), 111_936);
    }

    #[test]
    fn spatial_progression_and_embedding_dim() {
        let cfg = NetConfig::default();
        assert_eq!(cfg.spatial_progression(), vec![28, 14, 7, 3, 1]);
        assert_eq!(cfg.embedding_dim(), 64);
    }

    #[test]
    fn seeding_is_reproducible() {
        let cfg = NetConfig::default();
        let a = EmbeddingNetwork::<f32>::init(cfg, 7).unwrap();
        let b = EmbeddingNetwork::<f32>::init(cfg, 7).unwrap();
        let c = EmbeddingNetwork::<f32>::init(cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        let gamma = a.params().iter().find(|(n, _)| *n == "block0.bn.gamma").unwrap().1;
        assert!(gamma.value.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn zero_image_gives_finite_embedding() {
        let net = EmbeddingNetwork::<f32>::init(NetConfig::default(), 3).unwrap();
        let x = Tensor::zeros(&[1, 1, 28, 28]).unwrap();
        let e = net.embed(&x, NormMode::Eval).unwrap();
        assert_eq!(e.shape(), &[1, 64]);
        assert!(e.is_finite());
    }

    #[test]
    fn wrong_spatial_size_is_rejected() {
        let net = EmbeddingNetwork::<f32>::init(NetConfig::default(), 3).unwrap();
        let x = Tensor::zeros(&[1, 1, 27, 28]).unwrap();
        let err = net.embed(&x, NormMode::Eval).unwrap_err();
        assert!(err.to_string().contains("input height"));
    }

    #[test]
    fn repeated_images_embed_identically() {
        let mut net = EmbeddingNetwork::<f32>::init(NetConfig::default(), 5).unwrap();
        let img: Vec<f32> = (0..784).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let other: Vec<f32> = (0..784).map(|i| ((i * 11) % 53) as f32 / 52.0).collect();
        let batch = Tensor::new(&[3, 1, 28, 28], [img.clone(), other, img].concat()).unwrap();
        for mode in [NormMode::Eval, NormMode::Train] {
            let e = net.forward(&batch, mode, &mut OpTrace::disabled()).unwrap();
            assert_eq!(e.row(0), e.row(2));
        }
    }

    #[test]
    fn eval_embedding_is_deterministic() {
        let net = EmbeddingNetwork::<f32>::init(NetConfig::default(), 5).unwrap();
        let x = Tensor::from_fn(&[2, 1, 28, 28], |i| (i % 7) as f32 / 7.0).unwrap();
        let a = net.embed(&x, NormMode::Eval).unwrap();
        let b = net.embed(&x, NormMode::Eval).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn checkpoint_round_trip_restores_everything() {
        let mut net = EmbeddingNetwork::<f32>::init(NetConfig::default(), 11).unwrap();
        let x = Tensor::from_fn(&[4, 1, 28, 28], |i| (i % 13) as f32 / 13.0).unwrap();
        net.forward(&x, NormMode::Train, &mut OpTrace::disabled()).unwrap();
        net.params_mut().slots_mut()[0].step = 17;
        net.params_mut().slots_mut()[2].first_moment.fill(0.25);
        let back = EmbeddingNetwork::<f32>::from_checkpoint(&net.to_checkpoint()).unwrap();
        let mut expected = net.clone();
        expected.zero_grads();
        assert_eq!(back, expected);
    }

    #[test]
    fn golden_embedding() {
        let net = EmbeddingNetwork::<f32>::init(NetConfig::default(), 2024).unwrap();
        let x = Tensor::from_fn(&[1, 1, 28, 28], |i| ((i * 7) % 29) as f32 / 28.0).unwrap();
        let e = net.embed(&x, NormMode::Eval).unwrap();
        // frozen from the first verified build
        let head = [0.06894295, 0.0, 0.0, 0.0, 0.020486442, 0.0, 0.03863972, 0.110360466];
        for (got, want) in e.data().iter().zip(head) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
        let sum: f64 = e.data().iter().map(|&v| f64::from(v)).sum();
        assert!((sum - 1.396_006_332).abs() < 1e-4, "{sum}");
    }
}
