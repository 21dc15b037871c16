//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "WDNCKPT1"
//! spec_hash   32 bytes   SHA-256 of the resolved config JSON
//! seed         u64
//! config_len   u64, followed by config_len bytes of UTF-8 JSON
//! count        u64       number of entries
//! entry*:
//!   name_len   u32, name bytes (UTF-8)
//!   ndim       u32, ndim × u64 dims
//!   values     prod(dims) × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"WDNCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec_hash: [u8; 32],
    pub seed: u64,
    pub config_json: String,
    pub entries: Vec<(String, Tensor)>,
}

pub fn spec_hash(config_json: &str) -> [u8; 32] {
    Sha256::digest(config_json.as_bytes()).into()
}

impl Checkpoint {
    pub fn new(config_json: String, seed: u64) -> Self {
        Self {
            spec_hash: spec_hash(&config_json),
            seed,
            config_json,
            entries: Vec::new(),
        }
    }

    /// Appends every value of `set` under `prefix.`.
    pub fn push_set(&mut self, prefix: &str, set: &ParamSet) {
        for p in set.iter() {
            self.entries
                .push((format!("{prefix}.{}", p.name), p.value.clone()));
        }
    }

    /// Restores all values of `set` from entries stored under `prefix.`.
    pub fn load_set(&self, prefix: &str, set: &mut ParamSet) -> Result<()> {
        for p in set.iter_mut() {
            let key = format!("{prefix}.{}", p.name);
            let (_, t) = self
                .entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn verify_hash(&self) -> Result<()> {
        if spec_hash(&self.config_json) != self.spec_hash {
            return Err(Error::Checkpoint("config hash does not match embedded config".into()));
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.spec_hash)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.config_json.len() as u64).to_le_bytes())?;
        w.write_all(self.config_json.as_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut spec_hash = [0u8; 32];
        r.read_exact(&mut spec_hash)?;
        let seed = read_u64(&mut r)?;
        let clen = read_u64(&mut r)? as usize;
        let config_json = read_string(&mut r, clen)?;
        let count = read_u64(&mut r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, nlen)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(&mut r)? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            entries.push((name, Tensor::new(dims, data)?));
        }
        Ok(Self {
            spec_hash,
            seed,
            config_json,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_of_minimal_checkpoint() {
        let mut c = Checkpoint::new("{}".into(), 7);
        c.entries.push(("w".into(), Tensor::vector(vec![1.5])));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"WDNCKPT1");
        assert_eq!(&buf[40..48], &7u64.to_le_bytes());
        // 8 magic + 32 hash + 8 seed + 8 len + 2 json + 8 count + 4 + 1 + 4 + 8 + 8
        assert_eq!(buf.len(), 91);
        assert_eq!(&buf[83..], &1.5f64.to_le_bytes());
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, c);
        back.verify_hash().unwrap();
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(Checkpoint::read_from(&b"NOTACKPTxxxxxxxx"[..]).is_err());
    }

    #[test]
    fn load_set_checks_shapes() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::zeros(&[2]), true).unwrap();
        let mut c = Checkpoint::new("{}".into(), 0);
        c.entries.push(("net.w".into(), Tensor::zeros(&[3])));
        assert!(c.load_set("net", &mut set).is_err());
        assert!(c.load_set("other", &mut set).is_err());
    }
}
