//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic     8 bytes  "PCLCKPT\0"
//! version   u32
//! config    u64 vocab_size, dim, layers, heads, ffn_dim, max_len; f64 dropout_rate
//! arrays    u32 count, then per array in declaration order:
//!           u32 name length, name bytes (UTF-8), u64 rows, u64 cols, rows*cols f64
//! ```

use std::fs;
use std::path::Path;

use super::{EncoderConfig, EncoderParams, Layout};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PCLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &EncoderParams) -> Result<()> {
    let cfg = params.config();
    let mut buf = Vec::with_capacity(64 + params.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [cfg.vocab_size, cfg.dim, cfg.layers, cfg.heads, cfg.ffn_dim, cfg.max_len] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.dropout_rate.to_le_bytes());
    let named: Vec<_> = params.layout().named().collect();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, slot) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(slot.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(slot.cols as u64).to_le_bytes());
        for x in params.get(slot) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn same_shape(a: &EncoderConfig, b: &EncoderConfig) -> bool {
    (a.vocab_size, a.dim, a.layers, a.heads, a.ffn_dim, a.max_len)
        == (b.vocab_size, b.dim, b.layers, b.heads, b.ffn_dim, b.max_len)
}

/// Loads a checkpoint; with `expected`, rejects files whose architecture
/// differs (dropout rate is not compared).
pub fn load_checkpoint(path: &Path, expected: Option<&EncoderConfig>) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u64()? as usize;
    }
    let [vocab_size, dim, layers, heads, ffn_dim, max_len] = dims;
    let cfg = EncoderConfig { vocab_size, dim, layers, heads, ffn_dim, max_len, dropout_rate: r.f64()? };
    cfg.validate().map_err(|e| Error::Checkpoint(format!("invalid config echo: {e}")))?;
    if let Some(want) = expected {
        if !same_shape(want, &cfg) {
            return Err(Error::Checkpoint(format!("config mismatch: file has {cfg:?}, expected {want:?}")));
        }
    }
    let layout = Layout::new(&cfg);
    let named: Vec<_> = layout.named().map(|(n, s)| (n.to_string(), s)).collect();
    let count = r.u32()? as usize;
    if count != named.len() {
        return Err(Error::Checkpoint(format!("expected {} arrays, found {count}", named.len())));
    }
    let mut data = vec![0.0; layout.total];
    for (name, slot) in &named {
        let len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("non-UTF-8 array name".into()))?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected array `{name}`, found `{got}`")));
        }
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        if (rows, cols) != (slot.rows, slot.cols) {
            return Err(Error::Checkpoint(format!("array `{name}` has shape {rows}x{cols}")));
        }
        for x in &mut data[slot.range()] {
            *x = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    EncoderParams::from_parts(cfg, data)
}
