//! Checkpoint layout:
//!
//! ```text
//! siamctc-checkpoint\n
//! version <u32>\n
//! step <u64>\n
//! config-bytes <n>\n
//! <n bytes of canonical config text>
//! params <count>\n
//! per parameter: u32 name length, name, u32 rank, u64 dims, f64 values
//! 32-byte SHA-256 of everything above
//! ```
//!
//! All binary integers and floats are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::ParamSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "siamctc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(
            format!(
                "{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\nstep {}\nconfig-bytes {}\n",
                self.step,
                self.config_text.len()
            )
            .as_bytes(),
        );
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(format!("params {}\n", self.params.len()).as_bytes());
        for (name, shape, values) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let corrupt = |reason: &str| Error::corrupt(origin, reason);
        if bytes.len() < 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let actual = Sha256::digest(body);
        if actual.as_slice() != digest {
            return Err(Error::Checksum {
                path: origin.into(),
                expected: hex(digest),
                actual: hex(&actual),
            });
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.line()? != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version: u32 = r.field("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let step = r.field("step")?;
        let config_len: usize = r.field("config-bytes")?;
        let config_text = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| corrupt("config text is not UTF-8"))?;
        let count: usize = r.field("params")?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if !(1..=3).contains(&rank) {
                return Err(corrupt(&format!("parameter `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            params.push(name, &shape, values);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after parameters"));
        }
        Ok(Self {
            config_text,
            step,
            params,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::corrupt("checkpoint", "unexpected end of data"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(Error::corrupt("checkpoint", "missing header line"));
        };
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::corrupt("checkpoint", "header is not UTF-8"))?;
        self.pos += nl + 1;
        Ok(line)
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::corrupt("checkpoint", format!("expected `{key} <value>`, found `{line}`")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}
