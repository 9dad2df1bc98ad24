//! Checkpoint files: an 8-byte magic, a `u64` manifest length, a JSON
//! manifest, then every tensor in manifest order in the [`Tensor::write_to`]
//! layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MOCHACK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    step: u64,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Model configuration plus named tensors (parameters and optimizer state).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = Manifest {
            config: self.config.clone(),
            step: self.step,
            names: self.tensors.iter().map(|(n, _)| n.clone()).collect(),
            shapes: self.tensors.iter().map(|(_, t)| t.shape().to_vec()).collect(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8);
        if len > 64 << 20 {
            return Err(Error::Format(format!("implausible manifest length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)?;
        let m: Manifest = serde_json::from_slice(&json)?;
        if m.names.len() != m.shapes.len() {
            return Err(Error::Format("manifest names and shapes differ in length".into()));
        }
        let mut tensors = Vec::with_capacity(m.names.len());
        for (name, shape) in m.names.into_iter().zip(m.shapes) {
            let t = Tensor::read_from(r)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, manifest says {shape:?}",
                    t.shape()
                )));
            }
            tensors.push((name, t));
        }
        Ok(Self {
            config: m.config,
            step: m.step,
            tensors,
            extra: m.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
