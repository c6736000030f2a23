//! Channel attention gate built from average- and max-pooled descriptors fed
//! through one shared bottleneck MLP.

use super::params::{AttentionParams, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::ops::{
    dense, global_pool, relu, sigmoid, Backward, DenseBackward, GlobalPoolBackward, GradPair, PoolKind,
    ReluBackward, SigmoidBackward,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
struct MlpTrace<T: Real> {
    reduce: DenseBackward<T>,
    relu: ReluBackward<T>,
    expand: DenseBackward<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionBackward<T: Real> {
    input: Tensor<T>,
    gate: Tensor<T>,
    avg: GlobalPoolBackward,
    max: GlobalPoolBackward,
    avg_mlp: MlpTrace<T>,
    max_mlp: MlpTrace<T>,
    sigmoid: SigmoidBackward<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionGrads<T: Real> {
    pub input: Tensor<T>,
    pub reduce_weight: Tensor<T>,
    pub reduce_bias: Vec<T>,
    pub expand_weight: Tensor<T>,
    pub expand_bias: Vec<T>,
}

fn mlp<T: Real>(x: &Tensor<T>, p: &AttentionParams<T>) -> Result<(Tensor<T>, MlpTrace<T>)> {
    let h = dense(x, &p.reduce.weight, &p.reduce.bias)?;
    let a = relu(&h.value);
    let o = dense(&a.value, &p.expand.weight, &p.expand.bias)?;
    Ok((
        o.value,
        MlpTrace {
            reduce: h.backward,
            relu: a.backward,
            expand: o.backward,
        },
    ))
}

/// `x * sigmoid(mlp(avgpool(x)) + mlp(maxpool(x)))`, gate broadcast over h, w.
pub fn channel_attention<T: Real>(
    input: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<GradPair<T, AttentionBackward<T>>> {
    if input.c() != FEATURE_CHANNELS {
        return Err(Error::shape("channel_attention", "channels", FEATURE_CHANNELS, input.c()));
    }
    let avg = global_pool(input, PoolKind::Avg)?;
    let max = global_pool(input, PoolKind::Max)?;
    let (za, avg_mlp) = mlp(&avg.value, params)?;
    let (mut z, max_mlp) = mlp(&max.value, params)?;
    z.add_assign(&za);
    let gate = sigmoid(&z);

    let plane = input.plane();
    let mut out = input.clone();
    for (chunk, &g) in out.data_mut().chunks_mut(plane.max(1)).zip(gate.value.data()) {
        for v in chunk {
            *v *= g;
        }
    }

    Ok(GradPair {
        value: out,
        backward: AttentionBackward {
            input: input.clone(),
            gate: gate.value,
            avg: avg.backward,
            max: max.backward,
            avg_mlp,
            max_mlp,
            sigmoid: gate.backward,
        },
    })
}

impl<T: Real> AttentionBackward<T> {
    /// Per-sample, per-channel gate values `(n, c, 1, 1)`.
    pub fn gate(&self) -> &Tensor<T> {
        &self.gate
    }
}

impl<T: Real> Backward<T> for AttentionBackward<T> {
    type Grads = AttentionGrads<T>;

    fn backward(&self, upstream: &Tensor<T>) -> Result<AttentionGrads<T>> {
        crate::ops::check_upstream("channel_attention", self.input.shape(), upstream)?;
        let plane = self.input.plane();

        // Direct path and gradient w.r.t. the gate.
        let mut dx = upstream.clone();
        let mut dgate = Tensor::zeros(self.gate.shape());
        for (slot, ((dxc, xc), dy)) in dx
            .data_mut()
            .chunks_mut(plane)
            .zip(self.input.data().chunks(plane))
            .zip(upstream.data().chunks(plane))
            .enumerate()
        {
            let g = self.gate.data()[slot];
            let mut s = T::zero();
            for ((d, &x), &u) in dxc.iter_mut().zip(xc).zip(dy) {
                s += u * x;
                *d = u * g;
            }
            dgate.data_mut()[slot] = s;
        }

        let dz = self.sigmoid.backward(&dgate)?;
        let mut grads = AttentionGrads {
            input: dx,
            reduce_weight: Tensor::zeros(self.avg_mlp.reduce_weight_shape()),
            reduce_bias: Vec::new(),
            expand_weight: Tensor::zeros(self.avg_mlp.expand_weight_shape()),
            expand_bias: Vec::new(),
        };
        for (trace, pool) in [(&self.avg_mlp, &self.avg), (&self.max_mlp, &self.max)] {
            let e = trace.expand.backward(&dz)?;
            let da = trace.relu.backward_owned(e.input)?;
            let r = trace.reduce.backward(&da)?;
            let dpool = pool.backward(&r.input)?;
            grads.input.add_assign(&dpool);
            grads.expand_weight.add_assign(&e.weights);
            grads.reduce_weight.add_assign(&r.weights);
            accumulate(&mut grads.expand_bias, &e.bias);
            accumulate(&mut grads.reduce_bias, &r.bias);
        }
        Ok(grads)
    }
}

impl<T: Real> MlpTrace<T> {
    fn reduce_weight_shape(&self) -> [usize; 4] {
        self.reduce.weight_shape()
    }

    fn expand_weight_shape(&self) -> [usize; 4] {
        self.expand.weight_shape()
    }
}

fn accumulate<T: Real>(acc: &mut Vec<T>, v: &[T]) {
    if acc.is_empty() {
        acc.extend_from_slice(v);
    } else {
        for (a, &b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    }
}
