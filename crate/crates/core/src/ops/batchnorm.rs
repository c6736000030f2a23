use super::{check_upstream, Backward, GradPair};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    /// The state a freshly created layer is assumed to be in before its first
    /// update: zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn cast<U: Real>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormBackward<T: Real> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput<T: Real> {
    pub pair: GradPair<T, BatchNormBackward<T>>,
    /// Updated running statistics (train mode only). The input state is left
    /// untouched.
    pub running: Option<RunningStats<T>>,
}

/// Batch normalization over `(n, h, w)` per channel.
///
/// In train mode the batch statistics are used and a new running state
/// `(1 - momentum) * old + momentum * batch` is returned; a missing old state
/// counts as [`RunningStats::identity`]. Eval mode requires `running`.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<&RunningStats<T>>,
    mode: Mode,
    cfg: BatchNormConfig,
) -> Result<BatchNormOutput<T>> {
    let c = input.c();
    if gamma.len() != c {
        return Err(Error::shape("batchnorm", "gamma length", c, gamma.len()));
    }
    if beta.len() != c {
        return Err(Error::shape("batchnorm", "beta length", c, beta.len()));
    }
    if cfg.eps <= 0.0 {
        return Err(Error::Config(format!("batchnorm eps must be positive, got {}", cfg.eps)));
    }
    if let Some(stats) = running {
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batchnorm", "running stats length", c, stats.mean.len()));
        }
    }

    let (n, plane) = (input.n(), input.plane());
    let count = n * plane;
    let eps = T::lit(cfg.eps);

    let (mean, var, new_running) = match mode {
        Mode::Eval => {
            let stats = running.ok_or_else(|| {
                Error::State("batchnorm in eval mode needs populated running statistics".into())
            })?;
            (stats.mean.clone(), stats.var.clone(), None)
        }
        Mode::Train => {
            if count == 0 {
                return Err(Error::Input("batchnorm over an empty batch".into()));
            }
            let (mean, var) = channel_moments(input);
            let old = running.cloned().unwrap_or_else(|| RunningStats::identity(c));
            let m = T::lit(cfg.momentum);
            let keep = T::one() - m;
            let unbias = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let updated = RunningStats {
                mean: old.mean.iter().zip(&mean).map(|(&r, &b)| keep * r + m * b).collect(),
                var: old.var.iter().zip(&var).map(|(&r, &b)| keep * r + m * b * unbias).collect(),
            };
            (mean, var, Some(updated))
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for i in 0..n {
        for ch in 0..c {
            let start = input.index(i, ch, 0, 0);
            let src = &input.data()[start..start + plane];
            let xh = &mut normalized.data_mut()[start..start + plane];
            for (d, &x) in xh.iter_mut().zip(src) {
                *d = (x - mean[ch]) * inv_std[ch];
            }
            let dst = &mut out.data_mut()[start..start + plane];
            for (d, &x) in dst.iter_mut().zip(&normalized.data()[start..start + plane]) {
                *d = gamma[ch] * x + beta[ch];
            }
        }
    }

    Ok(BatchNormOutput {
        pair: GradPair {
            value: out,
            backward: BatchNormBackward {
                normalized,
                inv_std,
                gamma: gamma.to_vec(),
                mode,
            },
        },
        running: new_running,
    })
}

/// Biased per-channel mean and variance, two-pass.
fn channel_moments<T: Real>(input: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, plane) = (input.n(), input.c(), input.plane());
    let count = T::lit((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let start = input.index(i, ch, 0, 0);
            for &x in &input.data()[start..start + plane] {
                s += x;
            }
        }
        let mu = s / count;
        let mut sq = T::zero();
        for i in 0..n {
            let start = input.index(i, ch, 0, 0);
            for &x in &input.data()[start..start + plane] {
                let d = x - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / count;
    }
    (mean, var)
}

impl<T: Real> Backward<T> for BatchNormBackward<T> {
    type Grads = BatchNormGrads<T>;

    fn backward(&self, upstream: &Tensor<T>) -> Result<BatchNormGrads<T>> {
        let shape = self.normalized.shape();
        check_upstream("batchnorm", shape, upstream)?;
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = T::lit((n * plane) as f64);

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            for i in 0..n {
                let start = upstream.index(i, ch, 0, 0);
                let dy = &upstream.data()[start..start + plane];
                let xh = &self.normalized.data()[start..start + plane];
                for (&g, &x) in dy.iter().zip(xh) {
                    dbeta[ch] += g;
                    dgamma[ch] += g * x;
                }
            }
        }

        let mut dx = Tensor::zeros(shape);
        for ch in 0..c {
            let scale = self.gamma[ch] * self.inv_std[ch];
            for i in 0..n {
                let start = upstream.index(i, ch, 0, 0);
                let dy = &upstream.data()[start..start + plane];
                let xh = &self.normalized.data()[start..start + plane];
                let dst = &mut dx.data_mut()[start..start + plane];
                match self.mode {
                    Mode::Eval => {
                        for (d, &g) in dst.iter_mut().zip(dy) {
                            *d = scale * g;
                        }
                    }
                    Mode::Train => {
                        let k = scale / count;
                        for ((d, &g), &x) in dst.iter_mut().zip(dy).zip(xh) {
                            *d = k * (count * g - dbeta[ch] - x * dgamma[ch]);
                        }
                    }
                }
            }
        }

        Ok(BatchNormGrads {
            input: dx,
            gamma: dgamma,
            beta: dbeta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-3.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = random([4, 2, 5, 5], 3);
        let out = batchnorm(&x, &[1.0; 2], &[0.0; 2], None, Mode::Train, BatchNormConfig::default()).unwrap();
        let (mean, var) = channel_moments(&out.pair.value);
        for ch in 0..2 {
            assert!(mean[ch].abs() < 1e-5);
            assert!((var[ch] - 1.0).abs() < 1e-5, "var {}", var[ch]);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f32>::full([2, 1, 3, 3], 7.0);
        let out = batchnorm(&x, &[2.0], &[0.25], None, Mode::Train, BatchNormConfig::default()).unwrap();
        assert!(out.pair.value.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let cfg = BatchNormConfig::default();
        let out = batchnorm(&x, &[1.0], &[0.0], None, Mode::Train, cfg).unwrap();
        let stats = out.running.unwrap();
        // batch mean 2, unbiased var 2
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn eval_requires_running_stats() {
        let x = Tensor::<f32>::zeros([1, 2, 2, 2]);
        let err = batchnorm(&x, &[1.0; 2], &[0.0; 2], None, Mode::Eval, BatchNormConfig::default()).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::<f64>::full([1, 1, 1, 1], 3.0);
        let stats = RunningStats {
            mean: vec![1.0],
            var: vec![4.0 - 1e-5],
        };
        let out = batchnorm(&x, &[1.0], &[0.0], Some(&stats), Mode::Eval, BatchNormConfig::default()).unwrap();
        assert!((out.pair.value.data()[0] - 1.0).abs() < 1e-12);
        assert!(out.running.is_none());
    }
}
