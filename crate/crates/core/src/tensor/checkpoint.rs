//! Parameter checkpoints as a versioned JSON document:
//!
//! ```json
//! { "format": "iae-checkpoint", "version": 1,
//!   "tensors": { "rep.0.weight": { "shape": [30, 64], "values": [...] } } }
//! ```
//!
//! Values are row-major and written with round-trip float precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "iae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new<'a>(named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Self {
        let tensors = named
            .into_iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<Result<Tensor>> {
        self.tensors
            .get(name)
            .map(|r| Tensor::new(r.shape.clone(), r.values.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                expected: format!("{CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}"),
                found: format!("{} v{}", ckpt.format, ckpt.version),
            });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let w = Tensor::matrix(2, 2, vec![0.1, -1.0 / 3.0, 1e-300, 12345.678901234567]).unwrap();
        Checkpoint::new([("w", &w)]).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().tensor("w").unwrap().unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn rejects_foreign_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut c = Checkpoint::new(std::iter::empty());
        c.version = 99;
        fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
