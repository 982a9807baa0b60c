//! Binary checkpoint format.
//!
//! Layout: magic `SDPX`, format version (u32 LE), header length (u32 LE), a
//! UTF-8 JSON header carrying the model config, vocabulary listing and
//! training metadata, parameter count (u64 LE), then every parameter as an
//! IEEE-754 little-endian `f32` in canonical layout order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layout, ModelConfig, Parameters};
use crate::error::ModelError;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 4] = b"SDPX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub regime: String,
    pub steps: u64,
    pub final_loss: f64,
    pub seed: u64,
    pub tool_version: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub meta: TrainingMeta,
    pub params: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    meta: TrainingMeta,
}

impl Checkpoint {
    pub fn from_params(params: &Parameters, vocab: &Vocab, meta: TrainingMeta) -> Self {
        Self {
            config: params.config().clone(),
            vocab: vocab.clone(),
            meta,
            params: params.data().iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn parameters(&self) -> Result<Parameters, ModelError> {
        Parameters::from_data(self.config.clone(), self.params.iter().map(|&x| x as f64).collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.params.len() * 4);
        for x in &self.params {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory cannot fail");
        v
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Checkpoint(m);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        r.read_exact(&mut u32buf)?;
        let mut header = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate()?;
        if header.vocab.len() != header.config.vocab_size {
            return Err(bad("vocabulary size disagrees with config".into()));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let n = u64::from_le_bytes(u64buf) as usize;
        let expected = Layout::new(&header.config).total();
        if n != expected {
            return Err(bad(format!("expected {expected} parameters, file has {n}")));
        }
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of four bytes")))
            .collect();
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { config: header.config, vocab: header.vocab, meta: header.meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
