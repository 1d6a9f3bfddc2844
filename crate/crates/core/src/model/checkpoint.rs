//! Flat binary checkpoint container.
//!
//! ```text
//! magic        8 bytes  "RQEVCKP1"
//! meta_len     u32 LE, then meta_len bytes of `key=value` lines (UTF-8)
//! config_len   u32 LE, then config_len bytes of config TOML
//! count        u32 LE
//! per tensor:  u16 LE name_len, name (UTF-8), u8 ndim, ndim x u64 LE dims,
//!              prod(dims) x f32 LE values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::NetworkConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RQEVCKP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub config: NetworkConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| bad("invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(bad(format!("meta entry {k:?} not representable")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        let config = self.config.to_toml_string();
        for text in [&meta, &config] {
            out.extend((text.len() as u32).to_le_bytes());
            out.extend(text.as_bytes());
        }
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| bad("tensor name too long"))?;
            out.extend(len.to_le_bytes());
            out.extend(name.as_bytes());
            out.push(u8::try_from(t.shape().len()).map_err(|_| bad("too many dimensions"))?);
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let n = r.u32()? as usize;
        let mut meta = BTreeMap::new();
        for line in r.str(n)?.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad meta line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()? as usize;
        let config = NetworkConfig::from_toml_str(r.str(n)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = r.str(len)?.to_string();
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&m| m <= buf.len() / 4)
                .ok_or_else(|| bad(format!("{name}: implausible shape {shape:?}")))?;
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { meta, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing or invalid meta key {key}")))
    }
}
