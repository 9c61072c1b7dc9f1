//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CRNN" version:u8('1')
//! config_len:u32  config (key=value text)
//! blocks:u32
//!   name_len:u32 name  rank:u8  dims:u64 x rank  data:f64 x numel
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CrnnConfig, CrnnParams};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"CRNN";
pub const VERSION: u8 = b'1';

pub fn to_bytes(config: &CrnnConfig, params: &CrnnParams) -> Result<Vec<u8>> {
    params.check_config(config)?;
    let mut out = Vec::with_capacity(params.numel() * 8 + 1024);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let text = config.to_kv();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let names = params.block_names();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(params.blocks()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::CorruptCheckpoint(format!("{what} {v} too large")))
    }

    fn text(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::CorruptCheckpoint(format!("{what} is not UTF-8")))
    }
}

/// Parses a checkpoint and returns the stored configuration with its parameters.
pub fn from_bytes(bytes: &[u8]) -> Result<(CrnnConfig, CrnnParams)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            expected: VERSION,
            found: version,
        });
    }
    let len = r.u32("config length")?;
    let config = CrnnConfig::from_kv(r.text(len, "config")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config block: {e}")))?;
    config.validate()?;
    let count = r.u32("block count")?;
    let expected = CrnnParams::expected_dims(&config)?;
    let names = CrnnParams::block_names_for(&config);
    if count != expected.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} parameter blocks, config needs {}",
            expected.len()
        )));
    }
    let mut blocks = Vec::with_capacity(count);
    for (want_name, want_dims) in names.iter().zip(&expected) {
        let n = r.u32("block name length")?;
        let name = r.text(n, "block name")?;
        if name != want_name {
            return Err(Error::CorruptCheckpoint(format!("expected block `{want_name}`, found `{name}`")));
        }
        let rank = r.u8("rank")? as usize;
        if !(1..=3).contains(&rank) {
            return Err(Error::CorruptCheckpoint(format!("block `{name}` has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
        let found = Shape::new(&dims).map_err(|_| Error::CorruptCheckpoint(format!("block `{name}` dims {dims:?}")))?;
        if dims != *want_dims {
            return Err(Error::CheckpointShape {
                name: name.to_string(),
                expected: Shape::new(want_dims)?,
                found,
            });
        }
        let raw = r.take(found.numel() * 8, "block data")?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_shape(found, data)?;
        if !t.is_finite() {
            return Err(Error::CorruptCheckpoint(format!("block `{name}` holds non-finite values")));
        }
        blocks.push(t);
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = CrnnParams::from_blocks(config.cell, blocks)?;
    Ok((config, params))
}

pub fn save(path: impl AsRef<Path>, config: &CrnnConfig, params: &CrnnParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(config, params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(CrnnConfig, CrnnParams)> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads parameters into an existing configuration, rejecting any block whose shape differs.
pub fn load_into(path: impl AsRef<Path>, config: &CrnnConfig) -> Result<CrnnParams> {
    let (_, params) = load(path)?;
    params.check_config(config)?;
    Ok(params)
}

impl CrnnParams {
    pub(crate) fn block_names_for(config: &CrnnConfig) -> Vec<String> {
        let cell = config.cell;
        ["conv.kernel".to_string(), "conv.bias".to_string()]
            .into_iter()
            .chain(cell.block_names().iter().map(|n| format!("{cell}.{n}")))
            .chain(["out.weight".to_string(), "out.bias".to_string()])
            .collect()
    }
}
