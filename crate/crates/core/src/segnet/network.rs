use super::attention::{channel_attention, AttentionBackward};
use super::params::{trainable_names, ModelGrads, ModelParams};
use crate::error::{Error, Result};
use crate::ops::{
    batchnorm, conv2d, relu, Backward, BatchNormBackward, BatchNormConfig, Conv2dBackward, Mode, ReluBackward,
    RunningStats,
};
use crate::tensor::{Real, Tensor};

/// Per-pixel K-dimensional network output `(B, K, h, w)`.
pub type FeatureBatch<T = f32> = Tensor<T>;

#[derive(Clone, Debug)]
struct BlockTrace<T: Real> {
    conv: Conv2dBackward<T>,
    relu: ReluBackward<T>,
    bn: BatchNormBackward<T>,
}

/// Everything needed to backpropagate through one forward call.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Real> {
    blocks: Vec<BlockTrace<T>>,
    attention: AttentionBackward<T>,
    head: Conv2dBackward<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass<T: Real> {
    pub features: FeatureBatch<T>,
    pub trace: ForwardTrace<T>,
    /// Train mode: the updated batch-norm running statistics per block.
    pub running: Vec<RunningStats<T>>,
}

/// `5 x [conv3x3(64) -> relu -> batchnorm] -> channel attention -> conv1x1(K)`.
pub fn forward<T: Real>(params: &ModelParams<T>, batch: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
    if batch.c() != params.bands() {
        return Err(Error::shape("forward", "input bands", params.bands(), batch.c()));
    }
    if mode == Mode::Eval && !params.has_running_stats() {
        return Err(Error::State(
            "eval-mode forward needs running statistics; train the model first".into(),
        ));
    }
    let (h, w) = (batch.h(), batch.w());
    let bn_cfg = BatchNormConfig::default();

    let mut x = batch.clone();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    let mut running = Vec::new();
    for block in &params.blocks {
        let conv = conv2d(&x, &block.weight, &block.bias, 1)?;
        let act = relu(&conv.value);
        drop(conv.value);
        let bn = batchnorm(&act.value, &block.gamma, &block.beta, block.running.as_ref(), mode, bn_cfg)?;
        running.extend(bn.running);
        x = bn.pair.value;
        debug_assert_eq!((x.h(), x.w()), (h, w));
        blocks.push(BlockTrace {
            conv: conv.backward,
            relu: act.backward,
            bn: bn.pair.backward,
        });
    }

    let att = channel_attention(&x, &params.attention)?;
    let head = conv2d(&att.value, &params.head.weight, &params.head.bias, 0)?;

    Ok(ForwardPass {
        features: head.value,
        trace: ForwardTrace {
            blocks,
            attention: att.backward,
            head: head.backward,
        },
        running,
    })
}

impl<T: Real> ForwardTrace<T> {
    /// Gradients of a scalar objective w.r.t. every trainable tensor and the
    /// input batch, given its gradient w.r.t. the features.
    pub fn backward(&self, upstream: &FeatureBatch<T>) -> Result<(ModelGrads<T>, Tensor<T>)> {
        let head = self.head.backward(upstream)?;
        let att = self.attention.backward(&head.input)?;

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        let mut g = att.input;
        for block in self.blocks.iter().rev() {
            let bn = block.bn.backward(&g)?;
            let dr = block.relu.backward_owned(bn.input)?;
            let conv = block.conv.backward(&dr)?;
            g = conv.input;
            block_grads.push((conv.weights.into_vec(), conv.bias, bn.gamma, bn.beta));
        }
        block_grads.reverse();

        let mut values = Vec::new();
        for (w, b, gamma, beta) in block_grads {
            values.extend([w, b, gamma, beta]);
        }
        values.extend([
            att.reduce_weight.into_vec(),
            att.reduce_bias,
            att.expand_weight.into_vec(),
            att.expand_bias,
            head.weights.into_vec(),
            head.bias,
        ]);
        let entries = trainable_names().into_iter().zip(values).collect();
        Ok((ModelGrads { entries }, g))
    }
}

/// Copies the running statistics produced by a train-mode forward into
/// `params`.
pub fn apply_running_stats<T: Real>(params: &mut ModelParams<T>, running: Vec<RunningStats<T>>) {
    debug_assert_eq!(running.len(), params.blocks.len());
    for (block, stats) in params.blocks.iter_mut().zip(running) {
        block.running = Some(stats);
    }
}
