use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::RunningStats;
use crate::tensor::{Real, Tensor};

/// Width of every hidden convolution.
pub const FEATURE_CHANNELS: usize = 64;
/// Number of 3x3 conv -> relu -> batchnorm blocks before the attention.
pub const NUM_BLOCKS: usize = 5;
/// Attention bottleneck reductions accepted by [`ModelParams::init`].
pub const ALLOWED_RATIOS: [usize; 3] = [4, 8, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running: Option<RunningStats<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Shared two-layer MLP of the channel attention: `c -> c/r -> c`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = f32> {
    pub reduce: DenseParams<T>,
    pub expand: DenseParams<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModelMeta {
    pub seed: u64,
    pub config_digest: u64,
    /// Patch height/width the model was trained on; inference tiles use it.
    pub patch: (usize, usize),
}

/// All weights of the network: five 3x3 blocks, attention, 1x1 head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub blocks: Vec<ConvBlockParams<T>>,
    pub attention: AttentionParams<T>,
    pub head: DenseParams<T>,
    pub k: usize,
    pub ratio: usize,
    pub meta: ModelMeta,
}

/// Parameter names in the order used by [`ModelParams::trainable`],
/// [`ModelGrads`] and the optimizer state.
pub fn trainable_names() -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..NUM_BLOCKS {
        for part in ["conv.weight", "conv.bias", "bn.gamma", "bn.beta"] {
            names.push(format!("block{i}.{part}"));
        }
    }
    for part in [
        "attention.reduce.weight",
        "attention.reduce.bias",
        "attention.expand.weight",
        "attention.expand.bias",
        "head.weight",
        "head.bias",
    ] {
        names.push(part.to_string());
    }
    names
}

fn he_normal<T: Real>(shape: [usize; 4], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

impl<T: Real> ModelParams<T> {
    /// He (fan-in) normal weights, zero biases, unit gamma, zero beta, no
    /// running statistics. Deterministic in `seed`.
    pub fn init(seed: u64, bands: usize, k: usize, ratio: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("K must be at least 2, got {k}")));
        }
        if !ALLOWED_RATIOS.contains(&ratio) {
            return Err(Error::Config(format!(
                "attention ratio must be one of {ALLOWED_RATIOS:?}, got {ratio}"
            )));
        }
        if bands == 0 {
            return Err(Error::Config("input must have at least one band".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = FEATURE_CHANNELS;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for i in 0..NUM_BLOCKS {
            let in_c = if i == 0 { bands } else { c };
            blocks.push(ConvBlockParams {
                weight: he_normal([c, in_c, 3, 3], in_c * 9, &mut rng),
                bias: vec![T::zero(); c],
                gamma: vec![T::one(); c],
                beta: vec![T::zero(); c],
                running: None,
            });
        }
        let hidden = c / ratio;
        let attention = AttentionParams {
            reduce: DenseParams {
                weight: he_normal([hidden, c, 1, 1], c, &mut rng),
                bias: vec![T::zero(); hidden],
            },
            expand: DenseParams {
                weight: he_normal([c, hidden, 1, 1], hidden, &mut rng),
                bias: vec![T::zero(); c],
            },
        };
        let head = DenseParams {
            weight: he_normal([k, c, 1, 1], c, &mut rng),
            bias: vec![T::zero(); k],
        };
        Ok(Self {
            blocks,
            attention,
            head,
            k,
            ratio,
            meta: ModelMeta {
                seed,
                ..ModelMeta::default()
            },
        })
    }

    pub fn bands(&self) -> usize {
        self.blocks[0].weight.c()
    }

    /// True once every block carries running statistics (eval mode usable).
    pub fn has_running_stats(&self) -> bool {
        self.blocks.iter().all(|b| b.running.is_some())
    }

    /// Names and values of every trainable tensor, in the fixed layer order.
    pub fn trainable(&self) -> Vec<(String, &[T])> {
        let mut values: Vec<&[T]> = Vec::new();
        for b in &self.blocks {
            values.extend([b.weight.data(), &b.bias[..], &b.gamma[..], &b.beta[..]]);
        }
        values.extend([
            self.attention.reduce.weight.data(),
            &self.attention.reduce.bias[..],
            self.attention.expand.weight.data(),
            &self.attention.expand.bias[..],
            self.head.weight.data(),
            &self.head.bias[..],
        ]);
        trainable_names().into_iter().zip(values).collect()
    }

    /// Mutable view matching [`ModelParams::trainable`] entry for entry.
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in &mut self.blocks {
            out.push(b.weight.data_mut());
            out.push(&mut b.bias[..]);
            out.push(&mut b.gamma[..]);
            out.push(&mut b.beta[..]);
        }
        out.push(self.attention.reduce.weight.data_mut());
        out.push(&mut self.attention.reduce.bias[..]);
        out.push(self.attention.expand.weight.data_mut());
        out.push(&mut self.attention.expand.bias[..]);
        out.push(self.head.weight.data_mut());
        out.push(&mut self.head.bias[..]);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
            && self.blocks.iter().all(|b| {
                b.running
                    .as_ref()
                    .is_none_or(|r| r.mean.iter().chain(&r.var).all(|x| x.is_finite()))
            })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let vec = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        let dense = |d: &DenseParams<T>| DenseParams {
            weight: d.weight.cast(),
            bias: vec(&d.bias),
        };
        ModelParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlockParams {
                    weight: b.weight.cast(),
                    bias: vec(&b.bias),
                    gamma: vec(&b.gamma),
                    beta: vec(&b.beta),
                    running: b.running.as_ref().map(RunningStats::cast),
                })
                .collect(),
            attention: AttentionParams {
                reduce: dense(&self.attention.reduce),
                expand: dense(&self.attention.expand),
            },
            head: dense(&self.head),
            k: self.k,
            ratio: self.ratio,
            meta: self.meta,
        }
    }
}

/// Gradients for every trainable tensor, in [`ModelParams::trainable`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T = f32> {
    pub entries: Vec<(String, Vec<T>)>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            entries: params
                .trainable()
                .into_iter()
                .map(|(name, v)| (name, vec![T::zero(); v.len()]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| &v[..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::<f32>::init(7, 3, 8, 8).unwrap();
        let b = ModelParams::<f32>::init(7, 3, 8, 8).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f32>::init(8, 3, 8, 8).unwrap();
        assert_ne!(a.blocks[0].weight, c.blocks[0].weight);
    }

    #[test]
    fn layer_geometry_matches_architecture() {
        let p = ModelParams::<f32>::init(0, 3, 8, 8).unwrap();
        assert_eq!(p.blocks.len(), 5);
        assert_eq!(p.blocks[0].weight.shape(), [64, 3, 3, 3]);
        for b in &p.blocks[1..] {
            assert_eq!(b.weight.shape(), [64, 64, 3, 3]);
            assert!(b.running.is_none());
            assert!(b.gamma.iter().all(|&g| g == 1.0) && b.beta.iter().all(|&g| g == 0.0));
        }
        assert_eq!(p.attention.reduce.weight.shape(), [8, 64, 1, 1]);
        assert_eq!(p.attention.expand.weight.shape(), [64, 8, 1, 1]);
        assert_eq!(p.head.weight.shape(), [8, 64, 1, 1]);
        assert_eq!(64 % p.ratio, 0);
    }

    #[test]
    fn init_rejects_bad_config() {
        assert!(matches!(ModelParams::<f32>::init(0, 3, 1, 8), Err(Error::Config(_))));
        assert!(matches!(ModelParams::<f32>::init(0, 3, 8, 3), Err(Error::Config(_))));
    }

    #[test]
    fn he_scale_is_plausible() {
        let p = ModelParams::<f64>::init(1, 3, 8, 8).unwrap();
        let w = p.blocks[1].weight.data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 576.0;
        assert!((var / expected - 1.0).abs() < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn trainable_views_agree() {
        let mut p = ModelParams::<f32>::init(0, 3, 4, 16).unwrap();
        let lens: Vec<usize> = p.trainable().iter().map(|(_, v)| v.len()).collect();
        let lens_mut: Vec<usize> = p.trainable_mut().iter().map(|v| v.len()).collect();
        assert_eq!(lens, lens_mut);
        assert_eq!(lens.len(), 5 * 4 + 4 + 2);
    }
}
