//! Weight archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 8 bytes   magic "OCCTRKW1"
//! u64       header length in bytes
//! header    compact JSON: format version, model config, config hash, tensor table,
//!           optional training progress, free-form metadata
//! data      f32 values of every tensor in table order
//! ```
//!
//! Model parameters are stored under `param/`, optimiser velocity under `velocity/` and the
//! recurrent carries of an interrupted run under `carry/`. Encoding is byte-stable: the same
//! model and state always produce the same file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{ParamStore, Tensor};
use crate::video::{Carry, ModelConfig, Progress, TrainState, VideoDetector};

pub const MAGIC: &[u8; 8] = b"OCCTRKW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: u32,
    config: ModelConfig,
    config_hash: String,
    tensors: Vec<TensorEntry>,
    progress: Option<Progress>,
    meta: serde_json::Value,
}

/// Contents of a weight archive.
#[derive(Debug, Clone)]
pub struct Archive {
    pub model: VideoDetector<f32>,
    pub train: Option<TrainState<f32>>,
    pub meta: serde_json::Value,
}

const PARAM: &str = "param/";
const VELOCITY: &str = "velocity/";
const CARRY_FWD: &str = "carry/fwd/";
const CARRY_BWD: &str = "carry/bwd/";

fn carry_entries(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, c: &Carry<f32>) {
    out.push((format!("{prefix}memory"), c.memory.clone()));
    out.push((format!("{prefix}feature"), c.feature.clone()));
}

/// Serialises a model and, for an unfinished run, its training state.
pub fn encode(model: &VideoDetector<f32>, train: Option<&TrainState<f32>>, meta: serde_json::Value) -> Vec<u8> {
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    for (k, v) in model.params().iter() {
        tensors.push((format!("{PARAM}{k}"), v.clone()));
    }
    if let Some(st) = train {
        for (k, v) in st.velocity.iter() {
            tensors.push((format!("{VELOCITY}{k}"), v.clone()));
        }
        if let Some(c) = &st.forward_carry {
            carry_entries(&mut tensors, CARRY_FWD, c);
        }
        for (t, c) in st.backward_carries.iter().enumerate() {
            carry_entries(&mut tensors, &format!("{CARRY_BWD}{t:06}/"), c);
        }
    }
    let header = Header {
        format: FORMAT_VERSION,
        config: model.config.clone(),
        config_hash: model.config.hash(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape(),
            })
            .collect(),
        progress: train.map(|s| s.progress.clone()),
        meta,
    };
    let head = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + head.len() + 4 * tensors.iter().map(|t| t.1.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    let bad = |m: &str| Error::Archive(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a weight archive (bad magic)"));
    }
    let head_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let head_end = 16usize.checked_add(head_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..head_end]).map_err(|e| Error::Archive(format!("bad header: {e}")))?;
    if header.format != FORMAT_VERSION {
        return Err(Error::Archive(format!("unsupported format version {}", header.format)));
    }
    if header.config_hash != header.config.hash() {
        return Err(bad("config hash does not match the stored config"));
    }
    let mut pos = head_end;
    let mut params = ParamStore::new();
    let mut velocity = ParamStore::new();
    let mut carries: std::collections::BTreeMap<String, Tensor<f32>> = Default::default();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = pos.checked_add(4 * n).filter(|&x| x <= bytes.len()).ok_or_else(|| bad("truncated tensor data"))?;
        let data: Vec<f32> = bytes[pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        pos = end;
        let t = Tensor::from_vec(e.shape, data)?;
        if let Some(k) = e.name.strip_prefix(PARAM) {
            params.insert(k, t);
        } else if let Some(k) = e.name.strip_prefix(VELOCITY) {
            velocity.insert(k, t);
        } else if e.name.starts_with("carry/") {
            carries.insert(e.name.clone(), t);
        } else {
            return Err(Error::Archive(format!("unknown tensor `{}`", e.name)));
        }
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let mut model = VideoDetector::new(header.config.clone(), 0)?;
    model.load_params(&params)?;
    let mut take_carry = |prefix: &str| -> Option<Carry<f32>> {
        let memory = carries.remove(&format!("{prefix}memory"))?;
        let feature = carries.remove(&format!("{prefix}feature"))?;
        Some(Carry { memory, feature })
    };
    let train = match header.progress {
        Some(progress) => {
            let forward_carry = take_carry(CARRY_FWD);
            let mut backward_carries = Vec::new();
            while let Some(c) = take_carry(&format!("{CARRY_BWD}{:06}/", backward_carries.len())) {
                backward_carries.push(c);
            }
            Some(TrainState {
                progress,
                velocity,
                forward_carry,
                backward_carries,
            })
        }
        None => None,
    };
    if !carries.is_empty() {
        return Err(bad("incomplete recurrent carry in archive"));
    }
    Ok(Archive {
        model,
        train,
        meta: header.meta,
    })
}

pub fn save_archive(
    path: &Path,
    model: &VideoDetector<f32>,
    train: Option<&TrainState<f32>>,
    meta: serde_json::Value,
) -> Result<()> {
    fs::write(path, encode(model, train, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
