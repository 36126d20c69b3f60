//! Checkpoint files.
//!
//! Layout, all little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `PGCK` |
//! | 2 | format version, `u16` |
//! | 8 | header length `n`, `u64` |
//! | n | UTF-8 JSON header: configs, hierarchy, history, descriptors, tensor names and shapes |
//! | rest | every parameter as `f64`, in header order, then the momentum buffers in the same order |

use std::fs;
use std::path::Path;

use protograph_core::config::{ModelConfig, TrainConfig};
use protograph_core::layers::{seeded, Parameters};
use protograph_core::model::ModelParams;
use protograph_core::optim::SgdState;
use protograph_core::prototype::PrototypeHierarchy;
use protograph_core::train::{EpochRecord, TrainState};
use protograph_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"PGCK";
pub const VERSION: u16 = 1;
const PREFIX_LEN: usize = 4 + 2 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    nodes: usize,
    next_epoch: usize,
    hierarchy: Option<PrototypeHierarchy>,
    hierarchy_epoch: Option<usize>,
    descriptors: Option<Vec<Vec<[f64; 3]>>>,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
    has_velocity: bool,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> AppResult<Vec<u8>> {
    let state = &ckpt.state;
    let named = state.params.named_tensors();
    let velocity = &state.optimizer.velocity;
    if !velocity.is_empty() && velocity.len() != named.len() {
        return Err(AppError::Data(format!(
            "optimizer holds {} buffers for {} parameters",
            velocity.len(),
            named.len()
        )));
    }
    let header = Header {
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        nodes: state.params.nodes(),
        next_epoch: state.next_epoch,
        hierarchy: state.hierarchy.clone(),
        hierarchy_epoch: state.hierarchy_epoch,
        descriptors: state.descriptors.clone(),
        history: state.history.clone(),
        tensors: named.iter().map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() }).collect(),
        has_velocity: !velocity.is_empty(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| AppError::Data(format!("cannot encode checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in named.iter().map(|(_, t)| *t).chain(velocity) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> AppResult<Checkpoint> {
    let bad = |msg: String| AppError::Data(format!("invalid checkpoint: {msg}"));
    if bytes.len() < PREFIX_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version} (this build reads version {VERSION})")));
    }
    let header_len = u64::from_le_bytes(bytes[6..14].try_into().expect("eight bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREFIX_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(format!("header of {header_len} bytes runs past the end of the file")))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX_LEN..header_end]).map_err(|e| bad(format!("header: {e}")))?;

    let mut params = ModelParams::init(&header.model, header.nodes, &mut seeded(0))?;
    let mut payload = bytes[header_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")));
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>()
        * if header.has_velocity { 2 } else { 1 };
    let available = (bytes.len() - header_end) / 8;
    if available != expected || !(bytes.len() - header_end).is_multiple_of(8) {
        return Err(bad(format!("payload holds {available} values, header describes {expected}")));
    }
    let named: Vec<(String, Vec<usize>)> =
        params.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if named.len() != header.tensors.len() {
        return Err(bad(format!("{} tensors stored, model has {}", header.tensors.len(), named.len())));
    }
    for ((name, shape), entry) in named.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(bad(format!(
                "tensor {} {:?} does not match model tensor {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
    }
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = payload.next().expect("length checked");
        }
    }
    let mut velocity = Vec::new();
    if header.has_velocity {
        for (_, shape) in &named {
            let n = shape.iter().product();
            velocity.push(Tensor::new(shape.clone(), payload.by_ref().take(n).collect())?);
        }
    }
    let state = TrainState {
        params,
        optimizer: SgdState { velocity },
        hierarchy: header.hierarchy,
        hierarchy_epoch: header.hierarchy_epoch,
        descriptors: header.descriptors,
        next_epoch: header.next_epoch,
        history: header.history,
    };
    Ok(Checkpoint { model: header.model, train: header.train, state })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> AppResult<()> {
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| AppError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> AppResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        AppError::Data(msg) => AppError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
