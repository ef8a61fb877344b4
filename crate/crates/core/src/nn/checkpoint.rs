//! Binary parameter container.
//!
//! Layout, all little-endian: magic `FSML`, `u32` version, `u32` record
//! count, then per record a `u32` name length, the UTF-8 name, a `u32` rank,
//! `rank` dims as `u64`, and the `f64` payload. Records are sorted by name,
//! which makes the encoding canonical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::tensor::Array;

use super::params::{ModelParams, Section};

pub const MAGIC: &[u8; 4] = b"FSML";
pub const VERSION: u32 = 1;
const NORM_PREFIX: &str = "norm";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn from_params(p: &ModelParams) -> Self {
        let mut records = BTreeMap::new();
        for s in Section::ALL {
            for (k, a) in p.section(s) {
                records.insert(format!("{}/{k}", s.prefix()), a.clone());
            }
        }
        Checkpoint { records }
    }

    pub fn with_normalizer(mut self, n: &Normalizer) -> Self {
        for (g, (mean, std)) in &n.groups {
            self.records.insert(
                format!("{NORM_PREFIX}/{g}/mean"),
                Array::new(vec![mean.len()], mean.clone()).expect("vector shape"),
            );
            self.records.insert(
                format!("{NORM_PREFIX}/{g}/std"),
                Array::new(vec![std.len()], std.clone()).expect("vector shape"),
            );
        }
        self
    }

    pub fn params(&self) -> ModelParams {
        let mut p = ModelParams::default();
        for s in Section::ALL {
            let prefix = format!("{}/", s.prefix());
            for (k, a) in &self.records {
                if let Some(name) = k.strip_prefix(&prefix) {
                    p.section_mut(s).insert(name.to_string(), a.clone());
                }
            }
        }
        p
    }

    pub fn normalizer(&self) -> Option<Normalizer> {
        let mut groups = BTreeMap::new();
        for (k, a) in &self.records {
            let Some(rest) = k.strip_prefix(&format!("{NORM_PREFIX}/")) else {
                continue;
            };
            if let Some(g) = rest.strip_suffix("/mean") {
                let std = self.records.get(&format!("{NORM_PREFIX}/{g}/std"))?;
                groups.insert(g.to_string(), (a.data().to_vec(), std.data().to_vec()));
            }
        }
        (!groups.is_empty()).then_some(Normalizer { groups })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, a) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut records = BTreeMap::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("record too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if records.insert(name.clone(), Array::new(shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate record {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(Checkpoint { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
