//! Binary model file.
//!
//! ```text
//! magic      4 bytes  "PMU1"
//! version    u32
//! config     input_size u32, base_width u32, depth u32, dropout f32, seed u64
//! count      u32
//! records    count × { name_len u32, name utf-8, dims 4 × u32, values f32 × Π dims }
//! ```
//!
//! All integers and floats are little-endian. Batch-norm running statistics
//! are stored as ordinary records named `<layer>.running_mean` and
//! `<layer>.running_var`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

use super::{Unet, UnetConfig};

pub const MODEL_MAGIC: [u8; 4] = *b"PMU1";
pub const MODEL_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor4) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    for d in t.shape().dims() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_model(model: &Unet) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    put_u32(&mut out, MODEL_VERSION);
    put_u32(&mut out, cfg.input_size as u32);
    put_u32(&mut out, cfg.base_width as u32);
    put_u32(&mut out, cfg.depth as u32);
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    let stats: Vec<_> = model.running_stats().collect();
    put_u32(&mut out, (model.params().len() + 2 * stats.len()) as u32);
    for p in model.params().iter() {
        put_record(&mut out, &p.name, &p.value);
    }
    for (name, s) in stats {
        let c = s.mean.len();
        put_record(&mut out, &format!("{name}.running_mean"), &Tensor4::from_vec([1, c, 1, 1], s.mean.clone()).expect("shape"));
        put_record(&mut out, &format!("{name}.running_var"), &Tensor4::from_vec([1, c, 1, 1], s.var.clone()).expect("shape"));
    }
    out
}

pub fn save_model(model: &Unet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_model(model);
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::file(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn error(&self, at: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: at as u64,
            reason: reason.into(),
        }
    }
}

pub fn read_model(bytes: &[u8]) -> Result<Unet> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != MODEL_MAGIC {
        return Err(cur.error(0, "bad magic, not a model file"));
    }
    let version = cur.u32("version")?;
    if version > MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    if version == 0 {
        return Err(cur.error(4, "version 0 is invalid"));
    }
    let cfg_at = cur.pos;
    let config = UnetConfig {
        input_size: cur.u32("input size")? as usize,
        base_width: cur.u32("base width")? as usize,
        depth: cur.u32("depth")? as usize,
        dropout: cur.f32("dropout")?,
        seed: cur.u64("seed")?,
    };
    let mut model = Unet::new(config).map_err(|e| cur.error(cfg_at, format!("config block: {e}")))?;
    let count = cur.u32("record count")? as usize;
    let mut records: HashMap<String, (usize, Tensor4)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let at = cur.pos;
        let len = cur.u32("record name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "record name")?)
            .map_err(|_| cur.error(at, "record name is not utf-8"))?
            .to_owned();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32("record shape")? as usize;
        }
        let shape = Shape4::from(dims);
        let bytes_needed = dims
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| cur.error(at, format!("record {name:?} shape {shape:?} overflows")))?;
        let raw = cur.take(bytes_needed, "record values")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor4::from_vec(shape, data)?;
        if records.insert(name.clone(), (at, t)).is_some() {
            return Err(cur.error(at, format!("duplicate record {name:?}")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(cur.error(cur.pos, "trailing bytes after last record"));
    }

    let end = cur.pos;
    let mut take = |name: &str, shape: Shape4| -> Result<Tensor4> {
        let (at, t) = records
            .remove(name)
            .ok_or_else(|| Error::Format {
                offset: end as u64,
                reason: format!("missing record {name:?}"),
            })?;
        if t.shape() != shape {
            return Err(Error::Format {
                offset: at as u64,
                reason: format!("record {name:?} has shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        Ok(t)
    };
    for p in model.params_mut().iter_mut() {
        p.value = take(&p.name, p.value.shape())?;
    }
    let names: Vec<(String, usize)> = model.running_stats().map(|(n, s)| (n.to_owned(), s.mean.len())).collect();
    for (name, c) in names {
        let mean = take(&format!("{name}.running_mean"), Shape4::new(1, c, 1, 1))?;
        let var = take(&format!("{name}.running_var"), Shape4::new(1, c, 1, 1))?;
        let s = model.running_stats_mut(&name).expect("layer exists");
        s.mean = mean.into_data();
        s.var = var.into_data();
    }
    if let Some((name, (at, _))) = records.into_iter().min_by_key(|(_, (at, _))| *at) {
        return Err(Error::Format {
            offset: at as u64,
            reason: format!("unexpected record {name:?}"),
        });
    }
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Unet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    read_model(&bytes)
}
