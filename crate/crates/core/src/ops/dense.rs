use super::{check_upstream, Backward, GradPair};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct DenseBackward<T: Real> {
    input: Tensor<T>,
    weights: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T: Real> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Affine map `W x + b` applied to each sample. `input` is `(n, c_in, 1, 1)`,
/// `weights` is `(c_out, c_in, 1, 1)`.
pub fn dense<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &[T]) -> Result<GradPair<T, DenseBackward<T>>> {
    let [c_out, c_in, kh, kw] = weights.shape();
    if kh != 1 || kw != 1 {
        return Err(Error::shape("dense", "weight trailing dims", 1, kh * kw));
    }
    if input.plane() != 1 {
        return Err(Error::shape("dense", "input spatial size", 1, input.plane()));
    }
    if input.c() != c_in {
        return Err(Error::shape("dense", "input features", c_in, input.c()));
    }
    if bias.len() != c_out {
        return Err(Error::shape("dense", "bias length", c_out, bias.len()));
    }
    let n = input.n();
    let mut out = Tensor::zeros([n, c_out, 1, 1]);
    for (row, dst) in out.data_mut().chunks_mut(c_out.max(1)).enumerate().take(n) {
        dst.copy_from_slice(bias);
        // out[row] += W * x[row]
        T::gemm(c_out, c_in, 1, T::one(), weights.data(), (c_in, 1), input.sample(row), (1, 1), T::one(), dst, (1, 1));
    }
    Ok(GradPair {
        value: out,
        backward: DenseBackward {
            input: input.clone(),
            weights: weights.clone(),
        },
    })
}

impl<T: Real> DenseBackward<T> {
    pub fn weight_shape(&self) -> [usize; 4] {
        self.weights.shape()
    }
}

impl<T: Real> Backward<T> for DenseBackward<T> {
    type Grads = DenseGrads<T>;

    fn backward(&self, upstream: &Tensor<T>) -> Result<DenseGrads<T>> {
        let [c_out, c_in, _, _] = self.weights.shape();
        let n = self.input.n();
        check_upstream("dense", [n, c_out, 1, 1], upstream)?;
        let mut dx = Tensor::zeros(self.input.shape());
        let mut dw = Tensor::zeros(self.weights.shape());
        let mut db = vec![T::zero(); c_out];
        for row in 0..n {
            let g = upstream.sample(row);
            let x = self.input.sample(row);
            for (o, &go) in g.iter().enumerate() {
                db[o] += go;
                let wrow = &mut dw.data_mut()[o * c_in..(o + 1) * c_in];
                for (d, &xi) in wrow.iter_mut().zip(x) {
                    *d += go * xi;
                }
            }
            let dst = &mut dx.data_mut()[row * c_in..(row + 1) * c_in];
            T::gemm(c_in, c_out, 1, T::one(), self.weights.data(), (1, c_in), g, (1, 1), T::zero(), dst, (1, 1));
        }
        Ok(DenseGrads {
            input: dx,
            weights: dw,
            bias: db,
        })
    }
}
