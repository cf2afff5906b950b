//! Model checkpoints.
//!
//! Layout (little-endian): `MIMD`, version `u32`, length-prefixed model config
//! text, entry count `u32`, then per parameter its length-prefixed name and tensor,
//! in store insertion order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::MimDit;
use crate::config::MiMConfig;
use crate::error::{MimError, Result};
use crate::params::ParamStore;
use crate::tensor::{read_text, read_u32, write_text, Tensor};

const MAGIC: &[u8; 4] = b"MIMD";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cfg: MiMConfig,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(cfg: &MiMConfig, store: &ParamStore) -> Self {
        Checkpoint {
            cfg: cfg.clone(),
            store: store.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_text(w, &self.cfg.to_text())?;
        w.write_all(&(self.store.len() as u32).to_le_bytes())?;
        for (name, t) in self.store.iter() {
            write_text(w, name)?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Checkpoint> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| MimError::Format(format!("truncated checkpoint header: {e}")))?;
        if &magic != MAGIC {
            return Err(MimError::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(MimError::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg = MiMConfig::from_text(&read_text(r)?)?;
        let count = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = read_text(r)?;
            if store.find(&name).is_some() {
                return Err(MimError::Format(format!("duplicate parameter {name}")));
            }
            store.add(name, Tensor::read_from(r)?);
        }
        Ok(Checkpoint { cfg, store })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| MimError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| MimError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| MimError::io(path, e))?;
        Checkpoint::read_from(&mut BufReader::new(file))
    }

    /// Fails with a contract error naming every field that differs from `expected`.
    pub fn expect_config(&self, expected: &MiMConfig) -> Result<()> {
        let diffs = expected.differences(&self.cfg);
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(MimError::Contract(format!(
                "checkpoint config differs: {}",
                diffs.join("; ")
            )))
        }
    }

    /// Rebuilds the model and installs the stored parameters, which must match
    /// the architecture's parameter names and shapes one-for-one.
    pub fn instantiate(&self) -> Result<(MimDit, ParamStore)> {
        let (model, mut store) = MimDit::new(&self.cfg, 0)?;
        if store.len() != self.store.len() {
            return Err(MimError::Contract(format!(
                "checkpoint holds {} parameters, architecture needs {}",
                self.store.len(),
                store.len()
            )));
        }
        for (name, t) in self.store.iter() {
            store.assign(name, t.clone())?;
        }
        Ok((model, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MiMConfig {
        MiMConfig {
            model_dim: 8,
            block_count: 1,
            image_size: 8,
            ..MiMConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (_, store) = MimDit::new(&small(), 3).unwrap();
        let ck = Checkpoint::new(&small(), &store);
        let bytes = ck.to_bytes();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let (_, rebuilt) = back.instantiate().unwrap();
        assert_eq!(rebuilt, store);
    }

    #[test]
    fn mismatched_config_names_fields() {
        let (_, store) = MimDit::new(&small(), 0).unwrap();
        let ck = Checkpoint::new(&small(), &store);
        let other = MiMConfig {
            top_k: 1,
            window: 4,
            ..small()
        };
        match ck.expect_config(&other) {
            Err(MimError::Contract(msg)) => assert!(msg.contains("top_k") && msg.contains("window"), "{msg}"),
            r => panic!("expected contract error, got {r:?}"),
        }
        ck.expect_config(&small()).unwrap();
    }

    #[test]
    fn corrupt_streams_are_format_errors() {
        let (_, store) = MimDit::new(&small(), 0).unwrap();
        let bytes = Checkpoint::new(&small(), &store).to_bytes();
        assert!(matches!(
            Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]),
            Err(MimError::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(MimError::Format(_))));
    }
}
