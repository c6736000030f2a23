//! Self-supervised training on patches of a single scene.
//!
//! Each epoch visits every patch once in a random order, in chunks of
//! `batch_size`. Every chunk is optimized for `inner_iters` steps; each step
//! recomputes argmax pseudo-labels from the current features, adds the
//! clustering and contrastive losses and applies one SGD update.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::Scene;
use crate::losses::{assign_pseudo_labels, clustering_loss, contrastive_loss, shuffle_pairing, LossReport};
use crate::ops::Mode;
use crate::segnet::{apply_running_stats, forward, ModelGrads, ModelParams};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub inner_iters: usize,
    pub batch_size: usize,
    pub k: usize,
    pub patch: (usize, usize),
    pub stride: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub ratio: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            inner_iters: 50,
            batch_size: 10,
            k: 8,
            patch: (128, 128),
            stride: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 0,
            ratio: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.inner_iters < 1 {
            return fail("inner iterations must be at least 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch size must be at least 1".into());
        }
        if self.k < 2 {
            return fail(format!("K must be at least 2, got {}", self.k));
        }
        if self.patch.0 < 3 || self.patch.1 < 3 {
            return fail(format!("patch must be at least 3x3, got {}x{}", self.patch.0, self.patch.1));
        }
        if self.stride < 1 {
            return fail("stride must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !crate::segnet::ALLOWED_RATIOS.contains(&self.ratio) {
            return fail(format!(
                "attention ratio must be one of {:?}, got {}",
                crate::segnet::ALLOWED_RATIOS,
                self.ratio
            ));
        }
        Ok(())
    }

    /// FNV-1a over a canonical rendering of every field.
    pub fn digest(&self) -> u64 {
        let text = format!(
            "I={};J={};B={};K={};patch={}x{};stride={};lr={:e};momentum={:e};seed={};r={}",
            self.epochs,
            self.inner_iters,
            self.batch_size,
            self.k,
            self.patch.0,
            self.patch.1,
            self.stride,
            self.learning_rate,
            self.momentum,
            self.seed,
            self.ratio
        );
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// Top-left corners of every training window, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchIndex {
    pub offsets: Vec<(usize, usize)>,
}

impl PatchIndex {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Starts along one axis: multiples of `stride`, plus `len - patch` when the
/// grid would otherwise miss the far border.
fn axis_offsets(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

pub fn extract_patches(scene_dims: (usize, usize), cfg: &TrainConfig) -> Result<PatchIndex> {
    let (rows, cols) = scene_dims;
    let (ph, pw) = cfg.patch;
    if rows < ph || cols < pw {
        return Err(Error::Input(format!(
            "scene {rows}x{cols} is smaller than the {ph}x{pw} patch"
        )));
    }
    if cfg.stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let rs = axis_offsets(rows, ph, cfg.stride);
    let cs = axis_offsets(cols, pw, cfg.stride);
    Ok(PatchIndex {
        offsets: rs.iter().flat_map(|&r| cs.iter().map(move |&c| (r, c))).collect(),
    })
}

/// Momentum buffers, one per trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity {
    buffers: Vec<Vec<f32>>,
}

impl Velocity {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            buffers: params.trainable().iter().map(|(_, v)| vec![0.0; v.len()]).collect(),
        }
    }
}

/// `v <- momentum * v + g; w <- w - lr * v` for every trainable tensor.
/// Running statistics are not touched.
pub fn sgd_update(
    params: &mut ModelParams,
    grads: &ModelGrads,
    lr: f32,
    momentum: f32,
    velocity: &mut Velocity,
) -> Result<()> {
    for (name, g) in &grads.entries {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{i}] is {}", g[i])));
        }
    }
    let mut tensors = params.trainable_mut();
    if tensors.len() != grads.entries.len() || velocity.buffers.len() != grads.entries.len() {
        return Err(Error::shape(
            "sgd_update",
            "tensor count",
            tensors.len(),
            grads.entries.len(),
        ));
    }
    for ((w, (name, g)), v) in tensors.iter_mut().zip(&grads.entries).zip(&mut velocity.buffers) {
        if w.len() != g.len() || v.len() != g.len() {
            return Err(Error::Contract(format!(
                "gradient for {name} has {} entries, parameter has {}",
                g.len(),
                w.len()
            )));
        }
        for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub chunk: usize,
    pub inner: usize,
    pub loss: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// One tab-separated line per step:
    /// `step epoch chunk j clustering contrastive total`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}",
                r.step, r.epoch, r.chunk, r.inner, r.loss.clustering, r.loss.contrastive, r.loss.total
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(self.to_tsv().as_bytes())
    }

    /// Records grouped by `(epoch, chunk)`, in order.
    pub fn chunks(&self) -> Vec<&[TrainRecord]> {
        self.records
            .chunk_by(|a, b| (a.epoch, a.chunk) == (b.epoch, b.chunk))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
    /// Patch order visited in each epoch.
    pub epoch_orders: Vec<Vec<usize>>,
}

pub fn train(scene: &Scene, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(scene, cfg, |_| {})
}

/// [`train`] with a callback invoked after every optimizer step.
pub fn train_with(scene: &Scene, cfg: &TrainConfig, mut on_step: impl FnMut(&TrainRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let patches = extract_patches((scene.height(), scene.width()), cfg)?;

    let mut params = ModelParams::init(cfg.seed, scene.bands(), cfg.k, cfg.ratio)?;
    params.meta.config_digest = cfg.digest();
    params.meta.patch = cfg.patch;
    let mut velocity = Velocity::zeros_like(&params);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let (lr, momentum) = (cfg.learning_rate as f32, cfg.momentum as f32);
    let mut log = TrainLog::default();
    let mut epoch_orders = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut rng);
        for (chunk, members) in order.chunks(cfg.batch_size).enumerate() {
            let offsets: Vec<(usize, usize)> = members.iter().map(|&i| patches.offsets[i]).collect();
            let batch = scene.gather(&offsets, cfg.patch)?;
            for inner in 0..cfg.inner_iters {
                let step = log.records.len();
                let pass = forward(&params, &batch, Mode::Train)?;
                let labels = assign_pseudo_labels(&pass.features);
                let cluster = clustering_loss(&pass.features, &labels)?;
                let mut grad = cluster.grad;
                let contrastive = if batch.n() >= 2 {
                    let perm = shuffle_pairing(batch.n(), &mut rng)?;
                    let c = contrastive_loss(&pass.features, &perm)?;
                    grad.add_assign(&c.grad);
                    c.value
                } else {
                    0.0
                };
                let loss = LossReport::new(cluster.value, contrastive);
                if !loss.total.is_finite() {
                    return Err(Error::NonFinite(format!("loss at step {step} is {}", loss.total)));
                }
                let (grads, _) = pass.trace.backward(&grad)?;
                apply_running_stats(&mut params, pass.running);
                sgd_update(&mut params, &grads, lr, momentum, &mut velocity)?;
                if !params.is_finite() {
                    return Err(Error::NonFinite(format!("parameters after step {step}")));
                }
                let record = TrainRecord {
                    step,
                    epoch,
                    chunk,
                    inner,
                    loss,
                };
                on_step(&record);
                log.records.push(record);
            }
        }
        epoch_orders.push(order);
    }
    Ok(TrainOutcome {
        params,
        log,
        epoch_orders,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(patch: usize, stride: usize) -> TrainConfig {
        TrainConfig {
            patch: (patch, patch),
            stride,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn regular_grid() {
        let p = extract_patches((256, 256), &cfg(128, 64)).unwrap();
        assert_eq!(p.len(), 9);
        assert_eq!(p.offsets[0], (0, 0));
        assert_eq!(p.offsets[8], (128, 128));
    }

    #[test]
    fn scene_equal_to_patch() {
        assert_eq!(extract_patches((128, 128), &cfg(128, 64)).unwrap().offsets, vec![(0, 0)]);
    }

    #[test]
    fn edge_aligned_rows() {
        let p = extract_patches((257, 256), &cfg(128, 64)).unwrap();
        assert_eq!(p.len(), 12);
        let mut rows: Vec<usize> = p.offsets.iter().map(|o| o.0).collect();
        rows.dedup();
        assert_eq!(rows, vec![0, 64, 128, 129]);
    }

    #[test]
    fn small_scene_rejected() {
        assert!(matches!(extract_patches((100, 300), &cfg(128, 64)), Err(Error::Input(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { inner_iters: 0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { k: 1, ..TrainConfig::default() },
            TrainConfig { patch: (2, 8), ..TrainConfig::default() },
            TrainConfig { stride: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { ratio: 5, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn digest_depends_on_fields() {
        let a = TrainConfig::default();
        assert_eq!(a.digest(), TrainConfig::default().digest());
        assert_ne!(a.digest(), TrainConfig { seed: 1, ..a.clone() }.digest());
    }

    fn one_param_model() -> (ModelParams, ModelGrads) {
        let p = ModelParams::init(0, 1, 2, 8).unwrap();
        let g = ModelGrads::zeros_like(&p);
        (p, g)
    }

    #[test]
    fn plain_sgd_step() {
        let (mut p, mut g) = one_param_model();
        p.head.bias[0] = 1.0;
        let idx = g.entries.iter().position(|(n, _)| n == "head.bias").unwrap();
        g.entries[idx].1[0] = 2.0;
        let mut v = Velocity::zeros_like(&p);
        sgd_update(&mut p, &g, 0.1, 0.0, &mut v).unwrap();
        assert!((p.head.bias[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut p, g) = one_param_model();
        let before = p.clone();
        let mut v = Velocity::zeros_like(&p);
        sgd_update(&mut p, &g, 0.1, 0.9, &mut v).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_recursion() {
        let (mut p, mut g) = one_param_model();
        for (_, v) in &mut g.entries {
            v.fill(1.0);
        }
        let mut v = Velocity::zeros_like(&p);
        let w0 = p.head.bias[1];
        sgd_update(&mut p, &g, 0.1, 0.9, &mut v).unwrap();
        let w1 = p.head.bias[1];
        sgd_update(&mut p, &g, 0.1, 0.9, &mut v).unwrap();
        let w2 = p.head.bias[1];
        assert!(((w0 - w1) - 0.1).abs() < 1e-6);
        assert!(((w1 - w2) - 0.19).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut p, mut g) = one_param_model();
        let idx = g.entries.iter().position(|(n, _)| n == "block2.bn.gamma").unwrap();
        g.entries[idx].1[3] = f32::NAN;
        let mut v = Velocity::zeros_like(&p);
        match sgd_update(&mut p, &g, 0.1, 0.9, &mut v) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("block2.bn.gamma[3]"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_tsv_format() {
        let log = TrainLog {
            records: vec![TrainRecord {
                step: 0,
                epoch: 0,
                chunk: 1,
                inner: 2,
                loss: LossReport::new(0.5, 0.25),
            }],
        };
        let line = log.to_tsv();
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        assert_eq!(fields.len(), 7);
        assert_eq!(&fields[..4], &["0", "0", "1", "2"]);
        assert_eq!(fields[6].parse::<f64>().unwrap(), 0.75);
    }
}
