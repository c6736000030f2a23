//! Forward/backward kernels for the layers the segmentation network uses.
//!
//! There is no tape: every forward returns a [`GradPair`] holding the output
//! and whatever the matching backward needs. Callers chain backward passes by
//! hand in reverse order.

mod activation;
mod batchnorm;
mod conv;
mod dense;
pub mod gradcheck;
mod pool;

pub use activation::{relu, sigmoid, ReluBackward, SigmoidBackward};
pub use batchnorm::{
    batchnorm, BatchNormBackward, BatchNormConfig, BatchNormGrads, BatchNormOutput, Mode, RunningStats,
};
pub use conv::{conv2d, Conv2dBackward, Conv2dGrads};
pub use dense::{dense, DenseBackward, DenseGrads};
pub use pool::{global_pool, GlobalPoolBackward, PoolKind};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Output of a differentiable op together with its backward closure state.
#[derive(Clone, Debug)]
pub struct GradPair<T: Real, B> {
    pub value: Tensor<T>,
    pub backward: B,
}

/// Maps the gradient of a scalar objective w.r.t. an op's output onto
/// gradients w.r.t. its inputs and parameters.
pub trait Backward<T: Real> {
    type Grads;

    fn backward(&self, upstream: &Tensor<T>) -> Result<Self::Grads>;
}

pub(crate) fn check_upstream<T: Real>(op: &'static str, expected: [usize; 4], upstream: &Tensor<T>) -> Result<()> {
    let names = ["batch", "channels", "height", "width"];
    for (i, name) in names.into_iter().enumerate() {
        if expected[i] != upstream.shape()[i] {
            return Err(Error::shape(op, name, expected[i], upstream.shape()[i]));
        }
    }
    Ok(())
}
