//! Binary checkpoint format (little-endian throughout):
//!
//! ```text
//! "BVCK" | u32 version
//! | model config block
//! | u32 epoch | f64 best_val_loss | u64 rng_seed | u128 rng_word_pos
//! | tensor table (parameters)
//! | u64 adam step | tensor table (first moments) | tensor table (second moments)
//! ```
//!
//! A tensor table is `u32 count` followed by entries of
//! `u32 name_len | name | u8 dtype | u32 rank | u32 extents... | raw values`.

use std::fs;
use std::path::Path;

use super::AdamState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::nn::LayerParams;
use crate::tensor::{DType, Float, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub params: LayerParams<T>,
    pub optimizer: AdamState<T>,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn list(&mut self, xs: &[usize]) -> Result<()> {
        self.u32(xs.len())?;
        xs.iter().try_for_each(|&x| self.u32(x))
    }
    fn table<T: Float>(&mut self, params: &LayerParams<T>) -> Result<()> {
        self.u32(params.len())?;
        for (name, t) in params.iter() {
            self.u32(name.len())?;
            self.0.extend_from_slice(name.as_bytes());
            self.u8(T::DTYPE as u8);
            self.list(t.shape())?;
            for &v in t.data() {
                v.write_le(&mut self.0);
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn list(&mut self, what: &'static str) -> Result<Vec<usize>> {
        let n = self.u32(what)?;
        if n > 64 {
            return Err(Error::Format(format!("{what}: implausible length {n}")));
        }
        (0..n).map(|_| self.u32(what)).collect()
    }
    fn flag(&mut self, what: &'static str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("{what}: bad flag byte {b}"))),
        }
    }
    fn table<T: Float>(&mut self) -> Result<LayerParams<T>> {
        let count = self.u32("tensor count")?;
        let mut out = LayerParams::new();
        for _ in 0..count {
            let len = self.u32("name length")?;
            let name = std::str::from_utf8(self.take(len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let tag = self.u8("dtype")?;
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
            let shape = self.list("extents")?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("extent overflow".into()))?;
            let bytes = self.take(numel * dtype.size(), "tensor values")?;
            let data = bytes
                .chunks_exact(dtype.size())
                .map(|c| match dtype {
                    DType::F32 => T::of(f32::read_le(c) as f64),
                    DType::F64 => T::of(f64::read_le(c)),
                })
                .collect();
            out.insert(name, Tensor::new(&shape, data)?)?;
        }
        Ok(out)
    }
}

fn write_config(w: &mut Writer, c: &ModelConfig) -> Result<()> {
    w.u32(c.input_size)?;
    w.list(&c.channels)?;
    w.u32(c.latent_dim)?;
    w.u32(c.heads)?;
    w.list(&c.encoder_attention)?;
    w.list(&c.decoder_attention)?;
    w.u8(u8::from(c.attention));
    w.u8(u8::from(c.attention_residual));
    w.u8(c.kind.tag());
    w.u32(c.kernel)?;
    w.u32(c.stride)?;
    w.u32(c.padding)
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let config = ModelConfig {
        input_size: r.u32("input size")?,
        channels: r.list("channels")?,
        latent_dim: r.u32("latent dim")?,
        heads: r.u32("heads")?,
        encoder_attention: r.list("encoder attention")?,
        decoder_attention: r.list("decoder attention")?,
        attention: r.flag("attention flag")?,
        attention_residual: r.flag("residual flag")?,
        kind: {
            let tag = r.u8("model kind")?;
            ModelKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown model kind {tag}")))?
        },
        kernel: r.u32("kernel")?,
        stride: r.u32("stride")?,
        padding: r.u32("padding")?,
    };
    config.validate()?;
    Ok(config)
}

impl<T: Float> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&CHECKPOINT_MAGIC);
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_config(&mut w, &self.model)?;
        w.u32(self.epoch)?;
        w.0.extend_from_slice(&self.best_val_loss.to_le_bytes());
        w.u64(self.rng_seed);
        w.0.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        w.table(&self.params)?;
        w.u64(self.optimizer.step);
        w.table(&self.optimizer.first)?;
        w.table(&self.optimizer.second)?;
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let model = read_config(&mut r)?;
        let epoch = r.u32("epoch")?;
        let best_val_loss = f64::from_le_bytes(r.take(8, "best loss")?.try_into().unwrap());
        let rng_seed = r.u64("rng seed")?;
        let rng_word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
        let params = r.table()?;
        let optimizer = AdamState {
            step: r.u64("adam step")?,
            first: r.table()?,
            second: r.table()?,
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            params,
            optimizer,
            epoch,
            best_val_loss,
            rng_seed,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
