#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sceneseg_core::Tensor;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct-loop cross-correlation with zero padding, stride 1.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], pad: usize) -> Tensor<f64> {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, _, kh, kw] = w.shape();
    let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
    let mut out = Tensor::zeros([n, c_out, oh, ow]);
    for b in 0..n {
        for o in 0..c_out {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..c_in {
                        for i in 0..kh {
                            for j in 0..kw {
                                let (sy, sx) = ((y + i) as isize - pad as isize, (xx + j) as isize - pad as isize);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += x.at(b, c, sy as usize, sx as usize) * w.at(o, c, i, j);
                            }
                        }
                    }
                    let idx = out.index(b, o, y, xx);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
