//! Self-describing model container.
//!
//! ```text
//! AESF1\n
//! config <n>\n   n lines of key=value
//! vocab <n>\n    n lines, one piece each
//! params <n>\n   n binary records:
//!     u32 name length, name, u8 trainable, u32 rank, u64 dims…, f64 values…
//! ```
//! Integers and floats are little-endian; values are row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &str = "AESF1";

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub vocab: Vec<String>,
    pub params: ParamStore,
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let n = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing newline"))?;
        let s = std::str::from_utf8(&rest[..n]).map_err(|_| bad("header is not UTF-8"))?;
        self.pos += n + 1;
        Ok(s)
    }

    fn section(&mut self, name: &str) -> Result<usize> {
        let line = self.line()?;
        let count = line
            .strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| bad(format!("expected `{name} <count>`, found `{line}`")))?;
        Ok(count)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.config.get(key).map(String::as_str).ok_or_else(|| bad(format!("config key `{key}` missing")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| bad(format!("config key `{key}` has unparsable value `{raw}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("{MAGIC}\nconfig {}\n", self.config.len()).into_bytes();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(bad(format!("config entry `{k}` cannot be stored")));
            }
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.extend_from_slice(format!("vocab {}\n", self.vocab.len()).as_bytes());
        for piece in &self.vocab {
            if piece.contains('\n') {
                return Err(bad("vocabulary piece contains a newline"));
            }
            out.extend_from_slice(piece.as_bytes());
            out.push(b'\n');
        }
        out.extend_from_slice(format!("params {}\n", self.params.len()).as_bytes());
        for (name, entry) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.trainable as u8);
            let shape = entry.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in entry.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.line()? != MAGIC {
            return Err(bad("not an AESF1 checkpoint"));
        }
        let mut config = BTreeMap::new();
        for _ in 0..r.section("config")? {
            let line = r.line()?;
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad config line `{line}`")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let n_vocab = r.section("vocab")?;
        let mut vocab = Vec::with_capacity(n_vocab);
        for _ in 0..n_vocab {
            vocab.push(r.line()?.to_string());
        }
        let mut params = ParamStore::new();
        for _ in 0..r.section("params")? {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("parameter name is not UTF-8"))?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(bad(format!("bad trainable flag {b}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.insert(name, Tensor::new(shape, data)?, trainable)?;
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after parameter table"));
        }
        Ok(Checkpoint { config, vocab, params })
    }

    /// Writes the file and returns the SHA-256 of its bytes.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
