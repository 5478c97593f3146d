//! Binary checkpoint format.
//!
//! ```text
//! "HTTA" | version u32 | config_len u32 | config (key=value UTF-8)
//! | entry_count u32 | entries | crc32 u32
//! entry := name_len u16 | name | group u8 | dtype u8 | rank u8 | dims u64 * rank | payload
//! ```
//!
//! All integers and floats are little-endian; dtype 0 is f64. The CRC32 covers
//! every byte before it.

use std::fs;
use std::path::Path;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{Group, ModelConfig, ParamStore};

pub const MAGIC: &[u8; 4] = b"HTTA";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {} bytes at offset {}",
                n, self.pos
            )));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore) -> Self {
        Checkpoint { config, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_kv_string();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
            let rank = u8::try_from(p.tensor.rank())
                .map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.group.tag());
            out.push(DTYPE_F64);
            out.push(rank);
            for d in p.tensor.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&p.tensor.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Checkpoint(format!(
                "truncated: only {} bytes",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint(
                "integrity check failed (crc32 mismatch)".into(),
            ));
        }

        let mut r = Reader { buf: body, pos: 8 };
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
        let config = ModelConfig::from_kv_string(cfg_text)
            .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let tag = r.u8()?;
            let group = Group::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("unknown group tag {tag} for {name}")))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!(
                    "unsupported dtype {dtype} for {name}"
                )));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload =
                r.take(numel.checked_mul(8).ok_or_else(|| {
                    Error::Checkpoint(format!("payload size overflow for {name}"))
                })?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?
                .with_requires_grad(true);
            params.insert(name, tensor, group)?;
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after entry table",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(config: &ModelConfig, params: &ParamStore, path: &Path) -> Result<()> {
    Checkpoint::new(config.clone(), params.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
