//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "CMXCKPT\0"
//! version   u32
//! meta      str config_hash, u64 episodes, u64 env_steps, u64 seed,
//!           u32 n, n x (str key, str value)
//! sections  u32 n, n x (str name, u32 m, m x (str name, u32 rows, u32 cols, rows*cols f64))
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8. Maps are written in key
//! order, so decoding and re-encoding reproduces the input bytes exactly.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::NnError;
use crate::graph::Matrix;
use crate::optim::RmsProp;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"CMXCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub episodes: u64,
    pub env_steps: u64,
    pub seed: u64,
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub sections: BTreeMap<String, BTreeMap<String, Matrix>>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self { meta, sections: BTreeMap::new() }
    }

    pub fn put_store(&mut self, section: &str, store: &ParamStore) {
        let arrays = store.named().map(|(n, v)| (n.to_string(), v.clone())).collect();
        self.sections.insert(section.to_string(), arrays);
    }

    /// Loads a section into `store`. Every parameter of the store must be present
    /// with a matching shape, and the section may not carry extras.
    pub fn restore_store(&self, section: &str, store: &mut ParamStore) -> Result<(), NnError> {
        let arrays = self
            .sections
            .get(section)
            .ok_or_else(|| NnError::Checkpoint(format!("missing section {section}")))?;
        if arrays.len() != store.len() {
            return Err(NnError::Checkpoint(format!(
                "section {section} holds {} arrays, network expects {}",
                arrays.len(),
                store.len()
            )));
        }
        for (name, value) in arrays {
            let id = store
                .id_of(name)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown parameter {name}")))?;
            store
                .set(id, value.clone())
                .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn put_optimizer(&mut self, section: &str, opt: &RmsProp) {
        self.sections.insert(section.to_string(), opt.accumulators().clone());
    }

    pub fn restore_optimizer(&self, section: &str, opt: &mut RmsProp) -> Result<(), NnError> {
        let acc = self
            .sections
            .get(section)
            .ok_or_else(|| NnError::Checkpoint(format!("missing section {section}")))?;
        opt.set_accumulators(acc.clone());
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        write_str(&mut out, &self.meta.config_hash);
        out.write_u64::<LittleEndian>(self.meta.episodes).unwrap();
        out.write_u64::<LittleEndian>(self.meta.env_steps).unwrap();
        out.write_u64::<LittleEndian>(self.meta.seed).unwrap();
        out.write_u32::<LittleEndian>(self.meta.extra.len() as u32).unwrap();
        for (k, v) in &self.meta.extra {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out.write_u32::<LittleEndian>(self.sections.len() as u32).unwrap();
        for (name, arrays) in &self.sections {
            write_str(&mut out, name);
            out.write_u32::<LittleEndian>(arrays.len() as u32).unwrap();
            for (pname, m) in arrays {
                write_str(&mut out, pname);
                out.write_u32::<LittleEndian>(m.nrows() as u32).unwrap();
                out.write_u32::<LittleEndian>(m.ncols() as u32).unwrap();
                for v in m.iter() {
                    out.write_f64::<LittleEndian>(*v).unwrap();
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash = read_str(&mut r)?;
        let episodes = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let env_steps = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let seed = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let mut extra = BTreeMap::new();
        for _ in 0..r.read_u32::<LittleEndian>().map_err(truncated)? {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            extra.insert(k, v);
        }
        let mut sections = BTreeMap::new();
        for _ in 0..r.read_u32::<LittleEndian>().map_err(truncated)? {
            let name = read_str(&mut r)?;
            let mut arrays = BTreeMap::new();
            for _ in 0..r.read_u32::<LittleEndian>().map_err(truncated)? {
                let pname = read_str(&mut r)?;
                let rows = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
                let cols = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
                let remaining = bytes.len() - r.position() as usize;
                if rows.saturating_mul(cols).saturating_mul(8) > remaining {
                    return Err(NnError::Checkpoint(format!("array {pname} exceeds file")));
                }
                let mut data = vec![0.0; rows * cols];
                r.read_f64_into::<LittleEndian>(&mut data).map_err(truncated)?;
                let m = Matrix::from_shape_vec((rows, cols), data)
                    .map_err(|e| NnError::Checkpoint(e.to_string()))?;
                arrays.insert(pname, m);
            }
            sections.insert(name, arrays);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(NnError::Checkpoint("trailing bytes after sections".into()));
        }
        Ok(Self {
            meta: CheckpointMeta { config_hash, episodes, env_steps, seed, extra },
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn truncated(e: std::io::Error) -> NnError {
    NnError::Checkpoint(format!("truncated checkpoint: {e}"))
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String, NnError> {
    let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(NnError::Checkpoint("string length exceeds file".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|e| NnError::Checkpoint(e.to_string()))
}
