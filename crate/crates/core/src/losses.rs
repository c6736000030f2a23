//! Unsupervised objectives on the per-pixel network features: a
//! deep-clustering cross-entropy against argmax pseudo-labels, and a
//! contrastive term between features of deliberately mismatched patches.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-pixel cluster ids `(B, h, w)`, values in `[0, K)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl PseudoLabelBatch {
    pub fn sample(&self, b: usize) -> &[u16] {
        let plane = self.height * self.width;
        &self.labels[b * plane..(b + 1) * plane]
    }
}

/// A scalar objective and its gradient w.r.t. the features.
#[derive(Clone, Debug)]
pub struct LossValue<T: Real> {
    pub value: f64,
    pub grad: Tensor<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub clustering: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(clustering: f64, contrastive: f64) -> Self {
        Self {
            clustering,
            contrastive,
            total: clustering + contrastive,
        }
    }
}

/// Index of the largest of `values[0], values[stride], ...` (`k` entries);
/// the lowest index wins ties.
#[inline]
fn argmax_strided<T: Real>(values: &[T], offset: usize, stride: usize, k: usize) -> usize {
    let mut best = 0;
    let mut best_v = values[offset];
    for j in 1..k {
        let v = values[offset + j * stride];
        if v > best_v {
            best = j;
            best_v = v;
        }
    }
    best
}

/// Per-pixel argmax over the K feature channels. Labels are plain data: no
/// gradient flows through them.
pub fn assign_pseudo_labels<T: Real>(y: &Tensor<T>) -> PseudoLabelBatch {
    let [b, k, h, w] = y.shape();
    let plane = h * w;
    let mut labels = Vec::with_capacity(b * plane);
    for i in 0..b {
        let s = y.sample(i);
        for n in 0..plane {
            labels.push(argmax_strided(s, n, plane, k) as u16);
        }
    }
    PseudoLabelBatch {
        batch: b,
        height: h,
        width: w,
        labels,
    }
}

/// Mean over all pixels of all patches of `-log softmax(y)[label]`.
pub fn clustering_loss<T: Real>(y: &Tensor<T>, labels: &PseudoLabelBatch) -> Result<LossValue<T>> {
    let [b, k, h, w] = y.shape();
    if (labels.batch, labels.height, labels.width) != (b, h, w) {
        return Err(Error::shape("clustering_loss", "label map size", b * h * w, labels.labels.len()));
    }
    let plane = h * w;
    let count = b * plane;
    if count == 0 {
        return Err(Error::Input("clustering loss over an empty batch".into()));
    }
    if let Some(&bad) = labels.labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Contract(format!("pseudo-label {bad} out of range for K={k}")));
    }
    let inv = T::lit(1.0 / count as f64);
    let mut grad = Tensor::zeros(y.shape());
    let mut total = 0.0f64;
    let mut probs = vec![T::zero(); k];
    for i in 0..b {
        let ys = y.sample(i);
        let gs = &mut grad.data_mut()[i * k * plane..(i + 1) * k * plane];
        for (n, &label) in labels.sample(i).iter().enumerate() {
            let m = ys[n + argmax_strided(ys, n, plane, k) * plane];
            let mut z = T::zero();
            for (j, p) in probs.iter_mut().enumerate() {
                *p = (ys[n + j * plane] - m).exp();
                z += *p;
            }
            let c = label as usize;
            total += (z.ln() + m - ys[n + c * plane]).as_f64();
            for (j, &p) in probs.iter().enumerate() {
                let onehot = if j == c { T::one() } else { T::zero() };
                gs[n + j * plane] = (p / z - onehot) * inv;
            }
        }
    }
    Ok(LossValue {
        value: total / count as f64,
        grad,
    })
}

/// Random permutation of `0..batch` with no fixed point. Falls back to a
/// rotation by one if 100 draws all had a fixed point.
pub fn shuffle_pairing<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch < 2 {
        return Err(Error::Config(format!(
            "contrastive pairing needs at least 2 patches, got {batch}"
        )));
    }
    let mut perm: Vec<usize> = (0..batch).collect();
    for _ in 0..100 {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
    Ok((0..batch).map(|i| (i + 1) % batch).collect())
}

/// Mean over all pixels of all patches of `exp(-||y_b - y_perm(b)||_1)`.
///
/// Both members of each pair receive gradient. Coordinates with an exactly
/// zero difference contribute a zero subgradient.
pub fn contrastive_loss<T: Real>(y: &Tensor<T>, perm: &[usize]) -> Result<LossValue<T>> {
    let [b, k, h, w] = y.shape();
    if perm.len() != b {
        return Err(Error::shape("contrastive_loss", "permutation length", b, perm.len()));
    }
    let mut seen = vec![false; b];
    for (i, &p) in perm.iter().enumerate() {
        if p >= b || seen[p] {
            return Err(Error::Contract(format!("pairing {perm:?} is not a permutation")));
        }
        if p == i {
            return Err(Error::Contract(format!("pairing maps patch {i} to itself")));
        }
        seen[p] = true;
    }
    let plane = h * w;
    let count = b * plane;
    if count == 0 {
        return Err(Error::Input("contrastive loss over an empty batch".into()));
    }
    let sample_len = k * plane;
    let inv = T::lit(1.0 / count as f64);
    let mut grad = Tensor::zeros(y.shape());
    let mut total = 0.0f64;
    for (i, &p) in perm.iter().enumerate() {
        let ya = y.sample(i);
        let yb = y.sample(p);
        for n in 0..plane {
            let mut l1 = T::zero();
            for j in 0..k {
                l1 += (ya[n + j * plane] - yb[n + j * plane]).abs();
            }
            let term = (-l1).exp();
            total += term.as_f64();
            let scale = term * inv;
            let g = grad.data_mut();
            for j in 0..k {
                let d = ya[n + j * plane] - yb[n + j * plane];
                let s = if d > T::zero() {
                    scale
                } else if d < T::zero() {
                    -scale
                } else {
                    continue;
                };
                g[i * sample_len + n + j * plane] -= s;
                g[p * sample_len + n + j * plane] += s;
            }
        }
    }
    Ok(LossValue {
        value: total / count as f64,
        grad,
    })
}
