//! Versioned single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SMOECKPT"            8 bytes magic
//! schema                u32
//! header length         u64
//! header                UTF-8 JSON: config, counters, tensor directory
//! payload               f64 values of every tensor, in directory order
//! digest                SHA-256 of all preceding bytes, 32 bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use semimoe_autograd::Tensor;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::SemiMoe;
use crate::optim::Sgd;

pub const MAGIC: &[u8; 8] = b"SMOECKPT";
pub const SCHEMA_VERSION: u32 = 1;

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: SemiMoe,
    pub optimizer: Sgd,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: usize,
    pub best: Option<BestScore>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestScore {
    pub epoch: usize,
    pub dice: f64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = SemiMoe::new(&config)?;
        let optimizer = Sgd::new(config.momentum, config.weight_decay);
        Ok(Self {
            config,
            model,
            optimizer,
            epoch: 0,
            iteration: 0,
            best: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Param,
    Momentum,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    iteration: usize,
    best: Option<BestScore>,
    tensors: Vec<Entry>,
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: &str, kind, t: &Tensor| {
        tensors.push(Entry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in state.model.store.iter() {
        push(name, Kind::Param, t);
    }
    for (name, t) in &state.optimizer.buffers {
        push(name, Kind::Momentum, t);
    }
    let header = Header {
        config: state.config.clone(),
        epoch: state.epoch,
        iteration: state.iteration,
        best: state.best,
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + header.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let corrupt = |reason: &str| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let schema = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if schema != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: schema,
            expected: SCHEMA_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch"));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_bytes = body.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let mut payload = body[20 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));

    let mut state = TrainState::new(header.config)?;
    let mut params = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = payload.by_ref().take(n).collect();
        if data.len() != n {
            return Err(corrupt("payload shorter than directory"));
        }
        let t = Tensor::new(&entry.shape, data);
        match entry.kind {
            Kind::Param => {
                params.insert(entry.name, t);
            }
            Kind::Momentum => {
                state.optimizer.buffers.insert(entry.name, t);
            }
        }
    }
    if payload.next().is_some() {
        return Err(corrupt("payload longer than directory"));
    }
    if params.len() != state.model.store.len() {
        return Err(corrupt("parameter set does not match the configured architecture"));
    }
    for (name, t) in params {
        let slot = state
            .model
            .store
            .get_mut(&name)
            .ok_or_else(|| corrupt(&format!("unexpected parameter {name}")))?;
        if slot.shape() != t.shape() {
            return Err(corrupt(&format!("shape mismatch for {name}")));
        }
        *slot = t;
    }
    state.epoch = header.epoch;
    state.iteration = header.iteration;
    state.best = header.best;
    Ok(state)
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
