//! Whole-network forward and backward passes.

use super::layers::{
    conv2d_backward_with, conv2d_forward, dense_backward, dense_forward, dropout,
    maxpool2x2_backward, maxpool2x2_forward, relu_backward, softmax_cross_entropy, ConvCache,
    DropoutMode,
};
use super::{ModelSpec, Parameters};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub use super::layers::ReluRule;

pub enum Mode<'a> {
    Eval,
    /// Dropout active, masks drawn from the given generator.
    Train(&'a mut SeededRng),
}

/// Cached state of one conv block.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub(crate) conv_cache: ConvCache,
    /// Post-ReLU, pre-pool activation `[F, H, W]`.
    pub activation: Tensor,
    pub pool_argmax: Vec<u32>,
    pub pooled: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
    /// Input of each dense layer, in order (the last is the dropout output).
    pub dense_inputs: Vec<Tensor>,
    /// Post-ReLU outputs of the hidden dense layers.
    pub hidden: Vec<Tensor>,
    pub dropout_mask: Tensor,
    pub logits: Tensor,
}

pub fn forward(spec: &ModelSpec, params: &Parameters, x: &Tensor, mode: Mode<'_>) -> Result<ForwardTrace> {
    if x.shape() != spec.input_dims() {
        return Err(Error::shape("model_forward", x.shape(), &spec.input_dims()));
    }
    if !params.matches(spec) {
        return Err(Error::param("parameters do not match the model spec"));
    }
    let mut blocks = Vec::with_capacity(spec.conv_blocks.len());
    let mut current = x.clone();
    for layer in &params.conv {
        let (pre, conv_cache) = conv2d_forward(&current, &layer.weight, &layer.bias)?;
        let activation = pre.relu();
        let (pooled, pool_argmax) = maxpool2x2_forward(&activation)?;
        current = pooled.clone();
        blocks.push(BlockTrace {
            conv_cache,
            activation,
            pool_argmax,
            pooled,
        });
    }

    let n_dense = params.dense.len();
    let mut dense_inputs = Vec::with_capacity(n_dense);
    let mut hidden = Vec::with_capacity(n_dense - 1);
    let mut h = current.reshape(&[spec.flatten_dim()])?;
    for layer in &params.dense[..n_dense - 1] {
        let y = dense_forward(&h, &layer.weight, &layer.bias)?.relu();
        dense_inputs.push(h);
        hidden.push(y.clone());
        h = y;
    }
    let (dropped, dropout_mask) = match mode {
        Mode::Eval => dropout(&h, spec.dropout_rate, DropoutMode::Eval, &mut SeededRng::new(0))?,
        Mode::Train(rng) => dropout(&h, spec.dropout_rate, DropoutMode::Train, rng)?,
    };
    let out = &params.dense[n_dense - 1];
    let logits = dense_forward(&dropped, &out.weight, &out.bias)?;
    dense_inputs.push(dropped);

    Ok(ForwardTrace {
        blocks,
        dense_inputs,
        hidden,
        dropout_mask,
        logits,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct BackwardRequest {
    pub rule: ReluRule,
    pub parameter_grads: bool,
    pub input_grad: bool,
    pub record_relu_sites: bool,
}

impl BackwardRequest {
    pub fn training() -> Self {
        BackwardRequest {
            rule: ReluRule::Vanilla,
            parameter_grads: true,
            input_grad: false,
            record_relu_sites: false,
        }
    }

    pub fn saliency(rule: ReluRule) -> Self {
        BackwardRequest {
            rule,
            parameter_grads: false,
            input_grad: true,
            record_relu_sites: false,
        }
    }
}

/// Backward signal around one ReLU: what arrived, what the vanilla rule
/// would pass, and what the active rule actually passed.
#[derive(Clone, Debug)]
pub struct ReluSite {
    pub name: String,
    pub incoming: Tensor,
    pub vanilla: Tensor,
    pub propagated: Tensor,
}

#[derive(Clone, Debug)]
pub struct Backward {
    pub parameters: Option<Parameters>,
    pub input: Option<Tensor>,
    pub relu_sites: Vec<ReluSite>,
}

pub fn backward(
    spec: &ModelSpec,
    params: &Parameters,
    trace: &ForwardTrace,
    grad_logits: &Tensor,
    request: BackwardRequest,
) -> Result<Backward> {
    if grad_logits.shape() != trace.logits.shape() {
        return Err(Error::shape("backward", grad_logits.shape(), trace.logits.shape()));
    }
    let mut grads = request.parameter_grads.then(|| Parameters::zeros(spec));
    let mut sites = Vec::new();
    let mut relu = |name: String, activation: &Tensor, incoming: Tensor| -> Result<Tensor> {
        let propagated = relu_backward(activation, &incoming, request.rule)?;
        if request.record_relu_sites {
            let vanilla = relu_backward(activation, &incoming, ReluRule::Vanilla)?;
            sites.push(ReluSite {
                name,
                incoming,
                vanilla,
                propagated: propagated.clone(),
            });
        }
        Ok(propagated)
    };

    let n_dense = params.dense.len();
    let mut g = grad_logits.clone();
    for d in (0..n_dense).rev() {
        let layer = &params.dense[d];
        let db = dense_backward(&trace.dense_inputs[d], &layer.weight, &g)?;
        if let Some(grads) = grads.as_mut() {
            grads.dense[d].weight = db.weight;
            grads.dense[d].bias = db.bias;
        }
        g = db.input;
        if d == n_dense - 1 {
            g = g.mul(&trace.dropout_mask)?;
        }
        if d > 0 {
            g = relu(format!("dense{d}"), &trace.hidden[d - 1], g)?;
        }
    }

    let n_blocks = trace.blocks.len();
    let last = spec.block_activation_dims(n_blocks - 1);
    let mut g = g.reshape(&[last[0], last[1] / 2, last[2] / 2])?;
    let mut input = None;
    for b in (0..n_blocks).rev() {
        let block = &trace.blocks[b];
        let dims = spec.block_activation_dims(b);
        g = maxpool2x2_backward(&block.pool_argmax, &g, dims)?;
        g = relu(format!("conv{}", b + 1), &block.activation, g)?;
        let need_input = b > 0 || request.input_grad;
        if !need_input && grads.is_none() {
            break;
        }
        let cg = conv2d_backward_with(&block.conv_cache, &params.conv[b].weight, &g, need_input)?;
        if let Some(grads) = grads.as_mut() {
            grads.conv[b].weight = cg.weight;
            grads.conv[b].bias = cg.bias;
        }
        match cg.input {
            Some(gx) if b > 0 => g = gx,
            other => input = other,
        }
    }

    Ok(Backward {
        parameters: grads,
        input,
        relu_sites: sites,
    })
}

/// One sample's loss, logits and parameter gradients.
pub fn loss_and_gradients(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    label: usize,
    mode: Mode<'_>,
) -> Result<(f32, Tensor, Parameters)> {
    let trace = forward(spec, params, x, mode)?;
    let (loss, grad) = softmax_cross_entropy(&trace.logits, label)?;
    let back = backward(spec, params, &trace, &grad, BackwardRequest::training())?;
    let grads = back.parameters.expect("parameter gradients were requested");
    Ok((loss, trace.logits, grads))
}
