use crate::error::{Error, Result};
use crate::numerics::ops::{self, NormCache, NormMode, NormParams, RunningStats};
use crate::numerics::tensor::{Scalar, Tensor};

/// One trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> ParamSlot<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self {
            grad: Tensor::zeros_like(&value),
            first_moment: Tensor::zeros_like(&value),
            second_moment: Tensor::zeros_like(&value),
            value,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter slots, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    slots: Vec<ParamSlot<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            slots: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.slots.push(ParamSlot::new(value));
        ParamId(self.slots.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot<T> {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut ParamSlot<T> {
        &mut self.slots[id.0]
    }

    pub fn slots(&self) -> &[ParamSlot<T>] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [ParamSlot<T>] {
        &mut self.slots
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamSlot<T>)> {
        self.names.iter().map(String::as_str).zip(&self.slots)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grad.fill(T::zero());
        }
    }

    fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        self.slots[id.0].grad.add_assign(grad)
    }
}

#[derive(Debug)]
enum TracedOp<T> {
    Conv {
        input: Tensor<T>,
        weight: ParamId,
        bias: ParamId,
    },
    Norm {
        cache: NormCache<T>,
        gamma: ParamId,
        beta: ParamId,
    },
    Relu {
        input: Tensor<T>,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Linear {
        input: Tensor<T>,
        weight: ParamId,
        bias: ParamId,
    },
    Reshape {
        from: Vec<usize>,
    },
}

/// Ordered record of forward ops and the activations their backward needs.
///
/// A disabled trace runs the same forward ops and records nothing.
#[derive(Debug)]
pub struct OpTrace<T> {
    ops: Vec<TracedOp<T>>,
    enabled: bool,
    relu_pattern: Option<Vec<bool>>,
    pool_pattern: Option<Vec<usize>>,
}

impl<T: Scalar> Default for OpTrace<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> OpTrace<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            enabled: true,
            relu_pattern: None,
            pool_pattern: None,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::new()
        }
    }

    /// Also collect the ReLU activation pattern and pooling switches, which
    /// finite-difference checks use to detect crossed kinks.
    pub fn with_patterns(mut self) -> Self {
        self.relu_pattern = Some(Vec::new());
        self.pool_pattern = Some(Vec::new());
        self
    }

    pub fn patterns(&self) -> Option<(&[bool], &[usize])> {
        Some((self.relu_pattern.as_deref()?, self.pool_pattern.as_deref()?))
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: TracedOp<T>) {
        if self.enabled {
            self.ops.push(op);
        }
    }

    pub fn conv2d(
        &mut self,
        params: &ParamStore<T>,
        input: Tensor<T>,
        weight: ParamId,
        bias: ParamId,
    ) -> Result<Tensor<T>> {
        let out = ops::conv2d_forward(&input, params.value(weight), params.value(bias))?;
        self.push(TracedOp::Conv {
            input,
            weight,
            bias,
        });
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        params: &ParamStore<T>,
        running: &mut RunningStats<T>,
        input: Tensor<T>,
        gamma: ParamId,
        beta: ParamId,
        mode: NormMode,
        norm: NormParams,
    ) -> Result<Tensor<T>> {
        let (out, cache) = ops::batchnorm_forward(
            &input,
            params.value(gamma),
            params.value(beta),
            mode,
            running,
            norm,
        )?;
        self.push(TracedOp::Norm { cache, gamma, beta });
        Ok(out)
    }

    pub fn relu(&mut self, input: Tensor<T>) -> Tensor<T> {
        let out = ops::relu_forward(&input);
        if let Some(p) = &mut self.relu_pattern {
            p.extend(input.data().iter().map(|&v| v > T::zero()));
        }
        self.push(TracedOp::Relu { input });
        out
    }

    pub fn maxpool2d(&mut self, input: Tensor<T>) -> Result<Tensor<T>> {
        let (out, argmax) = ops::maxpool2d_forward(&input)?;
        if let Some(p) = &mut self.pool_pattern {
            p.extend_from_slice(&argmax);
        }
        self.push(TracedOp::MaxPool {
            input_shape: input.shape().to_vec(),
            argmax,
        });
        Ok(out)
    }

    pub fn linear(
        &mut self,
        params: &ParamStore<T>,
        input: Tensor<T>,
        weight: ParamId,
        bias: ParamId,
    ) -> Result<Tensor<T>> {
        let out = ops::linear_forward(&input, params.value(weight), params.value(bias))?;
        self.push(TracedOp::Linear {
            input,
            weight,
            bias,
        });
        Ok(out)
    }

    pub fn reshape(&mut self, input: Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        let from = input.shape().to_vec();
        let out = input.reshape(shape)?;
        self.push(TracedOp::Reshape { from });
        Ok(out)
    }

    /// Propagates `output_grad` back through the recorded ops in reverse
    /// order, accumulating parameter gradients into `params`. Returns the
    /// gradient with respect to the traced input. The trace is empty
    /// afterwards.
    pub fn backward(
        &mut self,
        params: &mut ParamStore<T>,
        output_grad: Tensor<T>,
    ) -> Result<Tensor<T>> {
        if self.ops.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let mut grad = output_grad;
        while let Some(op) = self.ops.pop() {
            grad = match op {
                TracedOp::Conv {
                    input,
                    weight,
                    bias,
                } => {
                    let g = ops::conv2d_backward(&input, params.value(weight), &grad)?;
                    params.accumulate(weight, &g.weight)?;
                    params.accumulate(bias, &g.bias)?;
                    g.input
                }
                TracedOp::Norm { cache, gamma, beta } => {
                    let g = ops::batchnorm_backward(&cache, params.value(gamma), &grad)?;
                    params.accumulate(gamma, &g.gamma)?;
                    params.accumulate(beta, &g.beta)?;
                    g.input
                }
                TracedOp::Relu { input } => ops::relu_backward(&input, &grad)?,
                TracedOp::MaxPool {
                    input_shape,
                    argmax,
                } => ops::maxpool2d_backward(&input_shape, &argmax, &grad)?,
                TracedOp::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let g = ops::linear_backward(&input, params.value(weight), &grad)?;
                    params.accumulate(weight, &g.weight)?;
                    params.accumulate(bias, &g.bias)?;
                    g.input
                }
                TracedOp::Reshape { from } => grad.reshape(&from)?,
            };
        }
        Ok(grad)
    }
}
