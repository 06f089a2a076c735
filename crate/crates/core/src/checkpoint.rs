//! Binary checkpoints of a training run.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"F2F1" | version: u32 | header_len: u64 | header (JSON) | payload (f64) | sha256 of all preceding bytes
//! ```
//!
//! The header lists every tensor with its shape and byte offset into the
//! payload. Parameters keep their store names; optimizer moments are stored
//! as `adam.<flow|disc>.<m|v>.<param>`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Adam, ParamStore, Tensor};
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"F2F1";
pub const VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;
const DIGEST: usize = 32;
/// Upper bound on header size accepted by the loader.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    iteration: u64,
    rng: RngState,
    flow_steps: u64,
    disc_steps: u64,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: u64,
    pub rng: RngState,
    pub flow_steps: u64,
    pub disc_steps: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn moment_tensors(
    tag: &str,
    opt: &Adam,
    state: &TrainState,
    out: &mut Vec<(String, Tensor)>,
) -> Result<()> {
    let (m, v) = opt.moments();
    for (kind, moments) in [("m", m), ("v", v)] {
        for (id, data) in opt.params().iter().zip(moments) {
            let p = state.model.store.get(*id);
            out.push((
                format!("adam.{tag}.{kind}.{}", p.name),
                Tensor::new(p.value.shape().to_vec(), data.clone())?,
            ));
        }
    }
    Ok(())
}

fn restore_moments(
    tag: &str,
    opt: &mut Adam,
    store: &ParamStore,
    steps: u64,
    lookup: &HashMap<&str, &Tensor>,
) -> Result<()> {
    let mut mv = [Vec::new(), Vec::new()];
    for (slot, kind) in mv.iter_mut().zip(["m", "v"]) {
        for id in opt.params() {
            let p = store.get(*id);
            let name = format!("adam.{tag}.{kind}.{}", p.name);
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            slot.push(t.data().to_vec());
        }
    }
    let [m, v] = mv;
    opt.restore(steps, m, v)
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, state: &TrainState) -> Result<Self> {
        let mut tensors: Vec<(String, Tensor)> = state
            .model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        moment_tensors("flow", &state.flow_opt, state, &mut tensors)?;
        moment_tensors("disc", &state.disc_opt, state, &mut tensors)?;
        Ok(Self {
            config: *config,
            iteration: state.iteration,
            rng: RngState::capture(&state.rng),
            flow_steps: state.flow_opt.step_count(),
            disc_steps: state.disc_opt.step_count(),
            tensors,
        })
    }

    /// Rebuild the training state. Every stored tensor must be consumed.
    pub fn restore(&self) -> Result<TrainState> {
        let mut state = TrainState::new(&self.config)?;
        let (params, moments): (Vec<_>, Vec<_>) = self
            .tensors
            .iter()
            .partition(|(n, _)| !n.starts_with("adam."));
        state
            .model
            .load_parameters(params.iter().map(|(n, t)| (n.as_str(), t)))?;
        let expected = 2 * (state.flow_opt.params().len() + state.disc_opt.params().len());
        if moments.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint has {} optimizer tensors, expected {expected}",
                moments.len()
            )));
        }
        let lookup: HashMap<&str, &Tensor> = moments.iter().map(|(n, t)| (n.as_str(), t)).collect();
        restore_moments(
            "flow",
            &mut state.flow_opt,
            &state.model.store,
            self.flow_steps,
            &lookup,
        )?;
        restore_moments(
            "disc",
            &mut state.disc_opt,
            &state.model.store,
            self.disc_steps,
            &lookup,
        )?;
        state.iteration = self.iteration;
        state.rng = self.rng.restore()?;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config,
            iteration: self.iteration,
            rng: self.rng.clone(),
            flow_steps: self.flow_steps,
            disc_steps: self.disc_steps,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + json.len() + offset as usize + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ctx = "checkpoint";
        if bytes.len() < PREFIX + DIGEST {
            return Err(Error::parse(ctx, bytes.len(), "truncated"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::parse(ctx, 0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::parse(
                ctx,
                4,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let body = bytes.len() - DIGEST;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(Error::parse(ctx, body, "checksum mismatch"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER || header_len > (body - PREFIX) as u64 {
            return Err(Error::parse(
                ctx,
                8,
                format!("header length {header_len} exceeds file"),
            ));
        }
        let payload_start = PREFIX + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[PREFIX..payload_start])
            .map_err(|e| Error::parse(ctx, PREFIX, format!("header: {e}")))?;
        let payload = &bytes[payload_start..body];
        let mut cursor = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0 && e.shape.iter().all(|&d| d > 0))
                .ok_or_else(|| {
                    Error::Format(format!(
                        "tensor `{}` has invalid shape {:?}",
                        e.name, e.shape
                    ))
                })?;
            let len = (count as u64).saturating_mul(8);
            if e.offset != cursor || len > payload.len() as u64 - cursor {
                return Err(Error::Format(format!(
                    "tensor `{}` at offset {} with {len} bytes does not fit the payload",
                    e.name, e.offset
                )));
            }
            let data = payload[cursor as usize..(cursor + len) as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor += len;
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        if cursor != payload.len() as u64 {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header declares {cursor}",
                payload.len()
            )));
        }
        Ok(Self {
            config: header.config,
            iteration: header.iteration,
            rng: header.rng,
            flow_steps: header.flow_steps,
            disc_steps: header.disc_steps,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
