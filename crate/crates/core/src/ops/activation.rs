use super::{check_upstream, Backward, GradPair};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct ReluBackward<T: Real> {
    input: Tensor<T>,
}

/// Elementwise `max(0, x)`. The subgradient at exactly 0 is 0.
pub fn relu<T: Real>(input: &Tensor<T>) -> GradPair<T, ReluBackward<T>> {
    GradPair {
        value: input.map(|v| if v > T::zero() { v } else { T::zero() }),
        backward: ReluBackward { input: input.clone() },
    }
}

impl<T: Real> ReluBackward<T> {
    /// Same as [`Backward::backward`] but consumes the upstream buffer.
    pub fn backward_owned(&self, mut upstream: Tensor<T>) -> Result<Tensor<T>> {
        check_upstream("relu", self.input.shape(), &upstream)?;
        for (g, &x) in upstream.data_mut().iter_mut().zip(self.input.data()) {
            if x <= T::zero() {
                *g = T::zero();
            }
        }
        Ok(upstream)
    }
}

impl<T: Real> Backward<T> for ReluBackward<T> {
    type Grads = Tensor<T>;

    fn backward(&self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_owned(upstream.clone())
    }
}

#[derive(Clone, Debug)]
pub struct SigmoidBackward<T: Real> {
    output: Tensor<T>,
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> GradPair<T, SigmoidBackward<T>> {
    let value = input.map(sigmoid_scalar);
    GradPair {
        backward: SigmoidBackward { output: value.clone() },
        value,
    }
}

impl<T: Real> Backward<T> for SigmoidBackward<T> {
    type Grads = Tensor<T>;

    fn backward(&self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        check_upstream("sigmoid", self.output.shape(), upstream)?;
        let mut grad = upstream.clone();
        for (g, &s) in grad.data_mut().iter_mut().zip(self.output.data()) {
            *g *= s * (T::one() - s);
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, v.len(), 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let out = relu(&t(&[-1.0, 0.0, 2.0]));
        assert_eq!(out.value.data(), &[0.0, 0.0, 2.0]);
        let g = out.backward.backward(&t(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative() {
        let out = relu(&t(&[-3.0, -0.5, -1e-9]));
        assert!(out.value.data().iter().all(|&v| v == 0.0));
        let g = out.backward.backward(&t(&[2.0, -4.0, 1.0])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_rejects_wrong_upstream() {
        let out = relu(&t(&[1.0, 2.0]));
        assert!(out.backward.backward(&t(&[1.0])).is_err());
    }

    #[test]
    fn sigmoid_values() {
        let out = sigmoid(&t(&[0.0, 800.0, -800.0]));
        assert_eq!(out.value.data()[0], 0.5);
        assert!(out.value.data()[1] <= 1.0 && out.value.data()[2] >= 0.0);
        assert!(out.value.is_finite());
        let g = out.backward.backward(&t(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data()[0], 0.25);
    }

    #[test]
    fn sigmoid_symmetry() {
        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.37).collect();
        let pos = sigmoid(&t(&xs)).value;
        let neg = sigmoid(&t(&xs.iter().map(|v| -v).collect::<Vec<_>>())).value;
        for (p, n) in pos.data().iter().zip(neg.data()) {
            assert!((p - (1.0 - n)).abs() < 1e-7);
        }
    }
}
