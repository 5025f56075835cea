//! Binary checkpoints: named little-endian `f64` tensors, optional optimizer moments,
//! and a trailing SHA-256 of everything before it.
//!
//! ```text
//! magic "RGCK" | version u32 | config hash [32] | step u64 | tensor count u32
//! per tensor: name len u32 | name | rank u32 | dims u64.. | data f64..
//! optimizer flag u8 [| adam hyper 4 x f64 | adam step u64 | moment count u32 | per moment: name, m, v]
//! sha256 [32]
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::pretrain::{AdamW, OptimState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; HASH_LEN],
    pub step: u64,
    pub params: ParamStore,
    pub optim: Option<OptimState>,
}

/// SHA-256 of the JSON form of a configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> [u8; HASH_LEN] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend(v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.params.num_scalars() * 8 + 1024);
        buf.extend(CHECKPOINT_MAGIC);
        buf.extend(CHECKPOINT_VERSION.to_le_bytes());
        buf.extend(self.config_hash);
        buf.extend(self.step.to_le_bytes());
        buf.extend((self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_tensor(&mut buf, name, t);
        }
        match &self.optim {
            None => buf.push(0),
            Some(o) => {
                buf.push(1);
                for v in [o.hyper.beta1, o.hyper.beta2, o.hyper.eps, o.hyper.weight_decay] {
                    buf.extend(v.to_le_bytes());
                }
                buf.extend(o.step.to_le_bytes());
                buf.extend((o.moments.len() as u32).to_le_bytes());
                for (name, (m, v)) in &o.moments {
                    put_tensor(&mut buf, name, m);
                    put_tensor(&mut buf, name, v);
                }
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend(digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |d: String| Error::format(path, d);
        if bytes.len() < 8 + HASH_LEN {
            return Err(fmt(format!("file too short ({} bytes)", bytes.len())));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!(
                "unsupported version: expected {CHECKPOINT_VERSION}, found {version}"
            )));
        }
        let (body, stored) = bytes.split_at(bytes.len() - HASH_LEN);
        let actual = Sha256::digest(body);
        if actual.as_slice() != stored {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected: hex(stored),
                found: hex(&actual),
            });
        }
        let mut r = Reader { buf: body, pos: 8, path };
        let config_hash: [u8; HASH_LEN] = r.take(HASH_LEN)?.try_into().expect("hash length");
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let (name, t) = r.tensor()?;
            params.insert(name, t);
        }
        let optim = match r.take(1)?[0] {
            0 => None,
            1 => {
                let hyper = AdamW {
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let step = r.u64()?;
                let k = r.u32()? as usize;
                let mut moments = BTreeMap::new();
                for _ in 0..k {
                    let (name, m) = r.tensor()?;
                    let (_, v) = r.tensor()?;
                    moments.insert(name, (m, v));
                }
                Some(OptimState { hyper, step, moments })
            }
            f => return Err(fmt(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(fmt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            config_hash,
            step,
            params,
            optim,
        })
    }

    /// Writes to a sibling temporary file, then renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = tmp_path(path);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }

    /// Checks names and shapes against `expected`; returns whether the config hash differs.
    pub fn verify(&self, expected: &ParamStore, config_hash: &[u8; HASH_LEN]) -> Result<bool> {
        self.params.check_against(expected)?;
        Ok(&self.config_hash != config_hash)
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format(self.path, "tensor name is not utf-8"))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::format(self.path, "tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(self.path, format!("{name}: {e}")))?;
        Ok((name, t))
    }
}
