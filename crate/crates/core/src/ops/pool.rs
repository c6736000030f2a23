use super::{check_upstream, Backward, GradPair};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Debug)]
pub struct GlobalPoolBackward {
    input_shape: [usize; 4],
    kind: PoolKind,
    /// Flat index of the winning element per `(n, c)` for max pooling.
    argmax: Vec<usize>,
}

/// Reduces every channel plane to one value: `(n, c, h, w) -> (n, c, 1, 1)`.
/// Max pooling routes gradient to the first maximum in row-major order.
pub fn global_pool<T: Real>(input: &Tensor<T>, kind: PoolKind) -> Result<GradPair<T, GlobalPoolBackward>> {
    let plane = input.plane();
    if plane == 0 {
        return Err(Error::shape("global_pool", "spatial size", 1, 0));
    }
    let (n, c) = (input.n(), input.c());
    let mut out = Tensor::zeros([n, c, 1, 1]);
    let mut argmax = Vec::new();
    let inv = T::lit(1.0 / plane as f64);
    for (slot, chunk) in input.data().chunks(plane).enumerate() {
        out.data_mut()[slot] = match kind {
            PoolKind::Avg => {
                let mut s = T::zero();
                for &v in chunk {
                    s += v;
                }
                s * inv
            }
            PoolKind::Max => {
                let mut best = 0;
                for (i, &v) in chunk.iter().enumerate() {
                    if v > chunk[best] {
                        best = i;
                    }
                }
                argmax.push(slot * plane + best);
                chunk[best]
            }
        };
    }
    Ok(GradPair {
        value: out,
        backward: GlobalPoolBackward {
            input_shape: input.shape(),
            kind,
            argmax,
        },
    })
}

impl<T: Real> Backward<T> for GlobalPoolBackward {
    type Grads = Tensor<T>;

    fn backward(&self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = self.input_shape;
        check_upstream("global_pool", [n, c, 1, 1], upstream)?;
        let plane = h * w;
        let mut grad = Tensor::zeros(self.input_shape);
        match self.kind {
            PoolKind::Avg => {
                let inv = T::lit(1.0 / plane as f64);
                for (chunk, &g) in grad.data_mut().chunks_mut(plane).zip(upstream.data()) {
                    chunk.fill(g * inv);
                }
            }
            PoolKind::Max => {
                for (&idx, &g) in self.argmax.iter().zip(upstream.data()) {
                    grad.data_mut()[idx] = g;
                }
            }
        }
        Ok(grad)
    }
}
