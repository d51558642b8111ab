//! Binary checkpoint and dataset files. All integers are little-endian `u32`
//! (record counts `u64`); all reals are little-endian IEEE-754 `f64`.
//!
//! Checkpoint (`EQMF1`):
//!
//! ```text
//! "EQMF1"
//! u32 horizon, u32 action_dim, u32 cond_width
//! u32 n_hidden, u32 hidden_width[n_hidden]
//! u32 activation_tag (0 = tanh, 1 = identity)
//! u32 time_conditioned (0 | 1)
//! u32 has_normalization (0 | 1)
//! f64 params[..]                  layer by layer: weights (out x in, row-major), then bias
//! [f64 action_mean[d], action_std[d], cond_mean[c], cond_std[c]]   if has_normalization
//! ```
//!
//! Dataset (`EQMD1`):
//!
//! ```text
//! "EQMD1"
//! u32 env_tag, u32 horizon, u32 action_dim, u32 cond_width, u32 state_len
//! u64 count
//! f64 action_mean[d], action_std[d], cond_mean[c], cond_std[c]
//! count x { f64 condition[c], f64 chunk[horizon * d] (row-major) }
//! ```

use std::fs;
use std::path::Path;

use crate::chunk::{ActionChunk, Condition};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::field::{Activation, FieldConfig, FieldParams};
use crate::training::{Dataset, Normalization};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"EQMF1";
pub const DATASET_MAGIC: &[u8; 5] = b"EQMD1";

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 5]) -> Result<()> {
        if self.take(5)? != magic {
            return Err(Error::Format(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| Error::Format("count overflows usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u32()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("flag must be 0 or 1, got {v}"))),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_normalization(w: &mut Writer, n: &Normalization) {
    w.f64s(&n.action_mean);
    w.f64s(&n.action_std);
    w.f64s(&n.cond_mean);
    w.f64s(&n.cond_std);
}

fn read_normalization(r: &mut Reader<'_>, d: usize, c: usize) -> Result<Normalization> {
    Ok(Normalization {
        action_mean: r.f64s(d)?,
        action_std: r.f64s(d)?,
        cond_mean: r.f64s(c)?,
        cond_std: r.f64s(c)?,
    })
}

/// Trained field plus the normalization its inputs and outputs live in.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: FieldParams,
    pub normalization: Option<Normalization>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let cfg = ckpt.params.config();
    let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
    w.u32(cfg.horizon)?;
    w.u32(cfg.action_dim)?;
    w.u32(cfg.cond_width)?;
    w.u32(cfg.hidden.len())?;
    for &h in &cfg.hidden {
        w.u32(h)?;
    }
    w.u32(cfg.activation.tag() as usize)?;
    w.u32(usize::from(cfg.time_conditioned))?;
    w.u32(usize::from(ckpt.normalization.is_some()))?;
    w.f64s(ckpt.params.values());
    if let Some(n) = &ckpt.normalization {
        if n.action_dim() != cfg.action_dim || n.cond_width() != cfg.cond_width {
            return Err(Error::InvalidArgument("normalization does not match field shape".into()));
        }
        write_normalization(&mut w, n);
    }
    Ok(w.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    let horizon = r.u32()?;
    let action_dim = r.u32()?;
    let cond_width = r.u32()?;
    let n_hidden = r.u32()?;
    if n_hidden > 64 {
        return Err(Error::Format(format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden = (0..n_hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let activation = Activation::from_tag(r.u32()? as u32)?;
    let time_conditioned = r.flag()?;
    let has_norm = r.flag()?;
    let config = FieldConfig {
        horizon,
        action_dim,
        cond_width,
        hidden,
        activation,
        time_conditioned,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let values = r.f64s(config.param_count())?;
    let params = FieldParams::from_values(config, values)?;
    let normalization = if has_norm {
        Some(read_normalization(&mut r, action_dim, cond_width)?)
    } else {
        None
    };
    r.finish()?;
    Ok(Checkpoint { params, normalization })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer(DATASET_MAGIC.to_vec());
    w.u32(ds.env.tag() as usize)?;
    w.u32(ds.horizon)?;
    w.u32(ds.action_dim)?;
    w.u32(ds.cond_width)?;
    w.u32(ds.state_len)?;
    w.u64(ds.records.len());
    write_normalization(&mut w, &ds.normalization);
    for (c, a) in &ds.records {
        w.f64s(c.as_slice());
        w.f64s(a.as_slice());
    }
    Ok(w.0)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(DATASET_MAGIC)?;
    let env = EnvKind::from_tag(r.u32()? as u32)?;
    let horizon = r.u32()?;
    let action_dim = r.u32()?;
    let cond_width = r.u32()?;
    let state_len = r.u32()?;
    let count = r.u64()?;
    if horizon == 0 || action_dim == 0 || state_len > cond_width {
        return Err(Error::Format("invalid dataset header".into()));
    }
    let normalization = read_normalization(&mut r, action_dim, cond_width)?;
    let record_bytes = 8 * (cond_width + horizon * action_dim);
    if count.checked_mul(record_bytes) != Some(bytes.len() - r.pos) {
        return Err(Error::Format(format!("record section does not hold {count} records")));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let cond = Condition::from_features(r.f64s(cond_width)?, state_len)?;
        let chunk = ActionChunk::new(horizon, action_dim, r.f64s(horizon * action_dim)?)?;
        records.push((cond, chunk));
    }
    r.finish()?;
    Ok(Dataset {
        env,
        horizon,
        action_dim,
        cond_width,
        state_len,
        records,
        normalization,
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
