//! Binary checkpoint container.
//!
//! ```text
//! "MTCK" version:u32 header_len:u64 header:json
//! values:f64* checksum:u64
//! ```
//!
//! The JSON header holds the model config, training state and the ordered
//! list of `(name, shape)` entries; values follow in that order as
//! little-endian `f64`. The checksum is FNV-1a over the value bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, MtModel, TrainingState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MTCK";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    state: TrainingState,
    params: Vec<(String, Vec<usize>)>,
}

/// All parameter tensors by canonical name, plus the config and training
/// state needed to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub state: TrainingState,
    pub tensors: Vec<(String, Tensor)>,
}

fn fnv(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h = (*h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
}

impl ModelCheckpoint {
    pub fn from_model(model: &MtModel) -> Self {
        Self {
            config: model.config.clone(),
            state: model.state.clone(),
            tensors: model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn into_model(self) -> Result<MtModel> {
        let mut model = MtModel::new(self.config, 0)?;
        model
            .params
            .load_values(self.tensors.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
        model.state = self.state;
        Ok(model)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            state: self.state.clone(),
            params: self.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (_, t) in &self.tensors {
            for x in t.data() {
                let b = x.to_le_bytes();
                fnv(&mut h, &b);
                w.write_all(&b)?;
            }
        }
        w.write_all(&h.to_le_bytes())?;
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!("checkpoint format version {version} is not supported")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut tensors = Vec::with_capacity(header.params.len());
        for (name, shape) in header.params {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut b8)?;
                fnv(&mut h, &b8);
                data.push(f64::from_le_bytes(b8));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        r.read_exact(&mut b8)?;
        if u64::from_le_bytes(b8) != h {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        Ok(Self {
            config: header.config,
            state: header.state,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

impl MtModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelCheckpoint::load(path)?.into_model()
    }
}
