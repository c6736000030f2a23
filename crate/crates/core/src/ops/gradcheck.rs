//! Central finite-difference verification of the analytic backward passes,
//! evaluated at `f64`.
//!
//! Every op is reduced to a scalar `sum(upstream * output)` with a fixed random
//! `upstream` (losses are already scalar), so one backward call yields the
//! full gradient that the finite differences are compared against.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batchnorm, conv2d, dense, global_pool, relu, sigmoid, Backward, BatchNormConfig, Mode, PoolKind};
use crate::error::{Error, Result};
use crate::losses::{assign_pseudo_labels, clustering_loss, contrastive_loss, PseudoLabelBatch};
use crate::segnet::{channel_attention, forward, AttentionParams, DenseParams, ModelParams, FEATURE_CHANNELS};
use crate::tensor::Tensor;

/// Differentiable operations registered with the checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpId {
    Conv2d,
    Relu,
    BatchNorm,
    GlobalAvgPool,
    GlobalMaxPool,
    Dense,
    Sigmoid,
    ChannelAttention,
    ClusteringLoss,
    ContrastiveLoss,
    /// The whole network, w.r.t. the input and every trainable tensor.
    Network,
}

impl OpId {
    pub const ALL: [OpId; 11] = [
        OpId::Conv2d,
        OpId::Relu,
        OpId::BatchNorm,
        OpId::GlobalAvgPool,
        OpId::GlobalMaxPool,
        OpId::Dense,
        OpId::Sigmoid,
        OpId::ChannelAttention,
        OpId::ClusteringLoss,
        OpId::ContrastiveLoss,
        OpId::Network,
    ];
}

/// Which coordinates to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to `per_tensor` random coordinates of each input, chosen by `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

/// Max over checked coordinates of `|analytic - fd| / max(1, |fd|)` where
/// `fd` is the central difference of `value` with half-width `step`.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
    coords: Coords,
    value: impl Fn(&[Tensor<f64>]) -> Result<f64>,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Config(format!("finite-difference step {step} outside [1e-6, 1e-3]")));
    }
    if inputs.len() != analytic.len() {
        return Err(Error::shape("gradcheck", "gradient count", inputs.len(), analytic.len()));
    }
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for (t, (input, grad)) in inputs.iter().zip(analytic).enumerate() {
        if input.shape() != grad.shape() {
            return Err(Error::shape("gradcheck", "gradient element count", input.numel(), grad.numel()));
        }
        let picked: Vec<usize> = match coords {
            Coords::All => (0..input.numel()).collect(),
            Coords::Sample { per_tensor, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9e37_79b9));
                let n = per_tensor.min(input.numel());
                sample(&mut rng, input.numel(), n).into_vec()
            }
        };
        for i in picked {
            let x = input.data()[i];
            work[t].data_mut()[i] = x + step;
            let plus = value(&work)?;
            work[t].data_mut()[i] = x - step;
            let minus = value(&work)?;
            work[t].data_mut()[i] = x;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at input {t} coordinate {i} (+: {plus}, -: {minus})"
                )));
            }
            let fd = (plus - minus) / (2.0 * step);
            let err = (grad.data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

fn vec_of(t: &Tensor<f64>) -> Vec<f64> {
    t.data().to_vec()
}

/// A concrete evaluation point: the op's differentiable inputs plus the
/// constants (upstream weights, labels, pairing, model) it needs.
#[derive(Clone, Debug)]
pub struct SamplePoint {
    pub op: OpId,
    pub inputs: Vec<Tensor<f64>>,
    upstream: Option<Tensor<f64>>,
    labels: Option<PseudoLabelBatch>,
    perm: Vec<usize>,
    model: Option<ModelParams<f64>>,
}

impl SamplePoint {
    /// Random point for `op` with every dimension at most 8 (the attention
    /// and network fix 64 hidden channels).
    pub fn random(op: OpId, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dim = |lo: usize| rng.random_range(lo..=8usize);
        let (n, c, h, w) = (dim(1), dim(1), dim(1), dim(1));
        let (n2, c2) = (dim(2), dim(2));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut point = SamplePoint {
            op,
            inputs: Vec::new(),
            upstream: None,
            labels: None,
            perm: Vec::new(),
            model: None,
        };
        match op {
            OpId::Conv2d => {
                let out_c = (n % 4) + 1;
                let kernel = if seed % 3 == 0 { 1 } else { 3 };
                point.inputs = vec![
                    random_tensor(&mut rng, [n, c, h, w], -1.0, 1.0),
                    random_tensor(&mut rng, [out_c, c, kernel, kernel], -1.0, 1.0),
                    random_tensor(&mut rng, [1, out_c, 1, 1], -1.0, 1.0),
                ];
            }
            OpId::Relu => {
                // Keep every coordinate well away from the kink.
                let x = random_tensor(&mut rng, [n, c, h, w], -1.0, 1.0);
                point.inputs = vec![x.map(|v| v.signum() * (0.05 + v.abs()))];
            }
            OpId::BatchNorm => {
                point.inputs = vec![
                    random_tensor(&mut rng, [n2, c, h, w], -3.0, 3.0),
                    random_tensor(&mut rng, [1, c, 1, 1], 0.5, 1.5),
                    random_tensor(&mut rng, [1, c, 1, 1], -0.5, 0.5),
                ];
            }
            OpId::GlobalAvgPool | OpId::GlobalMaxPool | OpId::Sigmoid => {
                point.inputs = vec![random_tensor(&mut rng, [n, c, h, w], -2.0, 2.0)];
            }
            OpId::Dense => {
                point.inputs = vec![
                    random_tensor(&mut rng, [n, c2, 1, 1], -1.0, 1.0),
                    random_tensor(&mut rng, [c, c2, 1, 1], -1.0, 1.0),
                    random_tensor(&mut rng, [1, c, 1, 1], -1.0, 1.0),
                ];
            }
            OpId::ChannelAttention => {
                let ratio = 8;
                let hidden = FEATURE_CHANNELS / ratio;
                point.inputs = vec![
                    random_tensor(&mut rng, [n.min(3), FEATURE_CHANNELS, h, w], -2.0, 2.0),
                    random_tensor(&mut rng, [hidden, FEATURE_CHANNELS, 1, 1], -0.3, 0.3),
                    random_tensor(&mut rng, [1, hidden, 1, 1], -0.1, 0.1),
                    random_tensor(&mut rng, [FEATURE_CHANNELS, hidden, 1, 1], -0.3, 0.3),
                    random_tensor(&mut rng, [1, FEATURE_CHANNELS, 1, 1], -0.1, 0.1),
                ];
            }
            OpId::ClusteringLoss => {
                let y = random_tensor(&mut rng, [n, c2, h, w], -2.0, 2.0);
                point.labels = Some(assign_pseudo_labels(&y));
                point.inputs = vec![y];
            }
            OpId::ContrastiveLoss => {
                point.inputs = vec![random_tensor(&mut rng, [n2, c2, h, w], -1.0, 1.0)];
                point.perm = (0..n2).map(|i| (i + 1) % n2).collect();
            }
            OpId::Network => {
                let mut model = ModelParams::<f64>::init(seed, 3, 4, 8).expect("valid config");
                // Zero-initialized biases put hidden units exactly on relu kinks.
                for v in model.trainable_mut() {
                    for x in v {
                        *x += rng.random_range(-0.1..0.1);
                    }
                }
                let mut inputs = vec![random_tensor(&mut rng, [1, 3, 6, 6], -1.0, 1.0)];
                for (_, v) in model.trainable() {
                    inputs.push(Tensor::vector(v.to_vec()));
                }
                point.inputs = inputs;
                point.model = Some(model);
            }
        }
        if !matches!(op, OpId::ClusteringLoss | OpId::ContrastiveLoss) {
            let out_shape = point.objective_output(&point.inputs).expect("valid point").shape();
            point.upstream = Some(random_tensor(&mut rng, out_shape, -1.0, 1.0));
        }
        point
    }

    fn model_from(&self, inputs: &[Tensor<f64>]) -> ModelParams<f64> {
        let mut model = self.model.clone().expect("network point carries a model");
        for (dst, src) in model.trainable_mut().into_iter().zip(&inputs[1..]) {
            dst.copy_from_slice(src.data());
        }
        model
    }

    fn attention_from(inputs: &[Tensor<f64>]) -> AttentionParams<f64> {
        AttentionParams {
            reduce: DenseParams {
                weight: inputs[1].clone(),
                bias: vec_of(&inputs[2]),
            },
            expand: DenseParams {
                weight: inputs[3].clone(),
                bias: vec_of(&inputs[4]),
            },
        }
    }

    /// Forward output of a non-loss op.
    fn objective_output(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let x = &inputs[0];
        Ok(match self.op {
            OpId::Conv2d => {
                let pad = inputs[1].h() / 2;
                conv2d(x, &inputs[1], inputs[2].data(), pad)?.value
            }
            OpId::Relu => relu(x).value,
            OpId::BatchNorm => {
                batchnorm(x, inputs[1].data(), inputs[2].data(), None, Mode::Train, BatchNormConfig::default())?
                    .pair
                    .value
            }
            OpId::GlobalAvgPool => global_pool(x, PoolKind::Avg)?.value,
            OpId::GlobalMaxPool => global_pool(x, PoolKind::Max)?.value,
            OpId::Dense => dense(x, &inputs[1], inputs[2].data())?.value,
            OpId::Sigmoid => sigmoid(x).value,
            OpId::ChannelAttention => channel_attention(x, &Self::attention_from(inputs))?.value,
            OpId::Network => forward(&self.model_from(inputs), x, Mode::Train)?.features,
            OpId::ClusteringLoss | OpId::ContrastiveLoss => {
                return Err(Error::Contract("losses have no tensor output".into()))
            }
        })
    }

    /// Scalar objective at `inputs`.
    pub fn value(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        match self.op {
            OpId::ClusteringLoss => Ok(clustering_loss(&inputs[0], self.labels.as_ref().expect("labels"))?.value),
            OpId::ContrastiveLoss => Ok(contrastive_loss(&inputs[0], &self.perm)?.value),
            _ => Ok(dot(&self.objective_output(inputs)?, self.upstream.as_ref().expect("upstream"))),
        }
    }

    /// Analytic gradient of [`SamplePoint::value`] w.r.t. every input.
    pub fn analytic(&self) -> Result<Vec<Tensor<f64>>> {
        let inputs = &self.inputs;
        let x = &inputs[0];
        let up = || self.upstream.as_ref().expect("upstream");
        let as_vec = |v: Vec<f64>| Tensor::vector(v);
        Ok(match self.op {
            OpId::Conv2d => {
                let pad = inputs[1].h() / 2;
                let g = conv2d(x, &inputs[1], inputs[2].data(), pad)?.backward.backward(up())?;
                vec![g.input, g.weights, as_vec(g.bias)]
            }
            OpId::Relu => vec![relu(x).backward.backward(up())?],
            OpId::BatchNorm => {
                let out = batchnorm(x, inputs[1].data(), inputs[2].data(), None, Mode::Train, BatchNormConfig::default())?;
                let g = out.pair.backward.backward(up())?;
                vec![g.input, as_vec(g.gamma), as_vec(g.beta)]
            }
            OpId::GlobalAvgPool => vec![global_pool(x, PoolKind::Avg)?.backward.backward(up())?],
            OpId::GlobalMaxPool => vec![global_pool(x, PoolKind::Max)?.backward.backward(up())?],
            OpId::Dense => {
                let g = dense(x, &inputs[1], inputs[2].data())?.backward.backward(up())?;
                vec![g.input, g.weights, as_vec(g.bias)]
            }
            OpId::Sigmoid => vec![sigmoid(x).backward.backward(up())?],
            OpId::ChannelAttention => {
                let g = channel_attention(x, &Self::attention_from(inputs))?.backward.backward(up())?;
                vec![g.input, g.reduce_weight, as_vec(g.reduce_bias), g.expand_weight, as_vec(g.expand_bias)]
            }
            OpId::ClusteringLoss => vec![clustering_loss(x, self.labels.as_ref().expect("labels"))?.grad],
            OpId::ContrastiveLoss => vec![contrastive_loss(x, &self.perm)?.grad],
            OpId::Network => {
                let pass = forward(&self.model_from(inputs), x, Mode::Train)?;
                let (grads, dx) = pass.trace.backward(up())?;
                let mut out = vec![dx];
                out.extend(grads.entries.into_iter().map(|(_, v)| as_vec(v)));
                out
            }
        })
    }
}

/// Finite-difference check of one registered op at `point`. The composite
/// network check samples a subset of coordinates per parameter tensor.
pub fn finite_difference_check(point: &SamplePoint, step: f64) -> Result<f64> {
    let analytic = point.analytic()?;
    let coords = match point.op {
        OpId::Network => Coords::Sample {
            per_tensor: 12,
            seed: 17,
        },
        OpId::ChannelAttention => Coords::Sample {
            per_tensor: 64,
            seed: 29,
        },
        _ => Coords::All,
    };
    check_gradients(&point.inputs, &analytic, step, coords, |x| point.value(x))
}
