//! Binary model format, little-endian throughout:
//!
//! ```text
//! "SSEG" | version u32 | K u32 | ratio u32 | bands u32
//! seed u64 | config digest u64 | patch height u32 | patch width u32
//! per block (5x): conv.weight, conv.bias, bn.gamma, bn.beta,
//!                 has_running u32, [running.mean, running.var]
//! attention.reduce.weight, attention.reduce.bias,
//! attention.expand.weight, attention.expand.bias, head.weight, head.bias
//! ```
//!
//! Each tensor record is `rank u32 | dims u32 * rank | f32 payload`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ops::RunningStats;
use crate::segnet::{AttentionParams, ConvBlockParams, DenseParams, ModelMeta, ModelParams, FEATURE_CHANNELS, NUM_BLOCKS};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSEG";
pub const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, dims: &[usize], data: &[f32]) {
        self.u32(dims.len());
        for &d in dims {
            self.u32(d);
        }
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn vector(&mut self, data: &[f32]) {
        self.tensor(&[data.len()], data);
    }
}

pub fn encode_model(params: &ModelParams) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u32(params.k);
    w.u32(params.ratio);
    w.u32(params.bands());
    w.u64(params.meta.seed);
    w.u64(params.meta.config_digest);
    w.u32(params.meta.patch.0);
    w.u32(params.meta.patch.1);
    for b in &params.blocks {
        w.tensor(&b.weight.shape(), b.weight.data());
        w.vector(&b.bias);
        w.vector(&b.gamma);
        w.vector(&b.beta);
        match &b.running {
            None => w.u32(0),
            Some(r) => {
                w.u32(1);
                w.vector(&r.mean);
                w.vector(&r.var);
            }
        }
    }
    for d in [&params.attention.reduce, &params.attention.expand, &params.head] {
        w.tensor(&d.weight.shape(), d.weight.data());
        w.vector(&d.bias);
    }
    w.buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail<T>(&self, at: usize, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: at,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(self.pos, format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, what: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let at = self.pos;
        let rank = self.u32(what)?;
        if rank != expected.len() {
            return self.fail(at, format!("{what}: rank {rank}, expected {}", expected.len()));
        }
        let dims_at = self.pos;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32(what)?);
        }
        if dims != expected {
            return self.fail(dims_at, format!("{what}: shape {dims:?}, expected {expected:?}"));
        }
        let len: usize = dims.iter().product();
        let bytes = self.take(len * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn dense(&mut self, name: &str, out: usize, inp: usize) -> Result<DenseParams> {
        let shape = [out, inp, 1, 1];
        let weight = self.tensor(&format!("{name}.weight"), &shape)?;
        let bias = self.tensor(&format!("{name}.bias"), &[out])?;
        Ok(DenseParams {
            weight: Tensor::from_vec(shape, weight)?,
            bias,
        })
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return r.fail(0, "bad magic, expected \"SSEG\"");
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return r.fail(4, format!("unsupported version {version}"));
    }
    let k = r.u32("K")?;
    let ratio = r.u32("ratio")?;
    let bands = r.u32("bands")?;
    if k < 2 {
        return r.fail(8, format!("K must be at least 2, got {k}"));
    }
    if ratio == 0 || FEATURE_CHANNELS % ratio != 0 {
        return r.fail(12, format!("ratio {ratio} does not divide {FEATURE_CHANNELS}"));
    }
    if bands == 0 {
        return r.fail(16, "zero input bands");
    }
    let seed = r.u64("seed")?;
    let config_digest = r.u64("config digest")?;
    let patch = (r.u32("patch height")?, r.u32("patch width")?);

    let c = FEATURE_CHANNELS;
    let mut blocks = Vec::with_capacity(NUM_BLOCKS);
    for i in 0..NUM_BLOCKS {
        let in_c = if i == 0 { bands } else { c };
        let shape = [c, in_c, 3, 3];
        let weight = Tensor::from_vec(shape, r.tensor(&format!("block{i}.conv.weight"), &shape)?)?;
        let bias = r.tensor(&format!("block{i}.conv.bias"), &[c])?;
        let gamma = r.tensor(&format!("block{i}.bn.gamma"), &[c])?;
        let beta = r.tensor(&format!("block{i}.bn.beta"), &[c])?;
        let flag_at = r.pos;
        let running = match r.u32("running flag")? {
            0 => None,
            1 => Some(RunningStats {
                mean: r.tensor(&format!("block{i}.bn.running_mean"), &[c])?,
                var: r.tensor(&format!("block{i}.bn.running_var"), &[c])?,
            }),
            other => return r.fail(flag_at, format!("running flag {other}, expected 0 or 1")),
        };
        blocks.push(ConvBlockParams {
            weight,
            bias,
            gamma,
            beta,
            running,
        });
    }
    let hidden = c / ratio;
    let attention = AttentionParams {
        reduce: r.dense("attention.reduce", hidden, c)?,
        expand: r.dense("attention.expand", c, hidden)?,
    };
    let head = r.dense("head", k, c)?;
    if r.pos != bytes.len() {
        return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(ModelParams {
        blocks,
        attention,
        head,
        k,
        ratio,
        meta: ModelMeta {
            seed,
            config_digest,
            patch,
        },
    })
}

pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(params))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_model(&std::fs::read(path)?)
}
