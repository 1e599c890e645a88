//! Single-file model container.
//!
//! Layout: the 8-byte magic `TFMOECKP`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the UTF-8 JSON manifest, then the
//! payload: every tensor as little-endian `f64` values, concatenated in
//! manifest order. The manifest records names, groups, shapes, payload offsets,
//! the payload length and SHA-256, normalization statistics per task, the
//! pre-training groups, the RNG position and the config hash.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::PretrainAutoencoder;
use crate::config::hex;
use crate::data::NormStats;
use crate::engine::{ModelDims, ModelState, SeedGroups};
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore, Tensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TFMOECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal word position.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub dims: ModelDims,
    pub tensors: Vec<TensorEntry>,
    pub payload_values: usize,
    pub payload_sha256: String,
    pub norms: BTreeMap<usize, NormStats>,
    pub seed_groups: Option<SeedGroups>,
    pub trained_tasks: usize,
    pub rng: RngState,
    pub eval_seed: u64,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState { seed: hex(&rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let bad = || Error::Checksum("malformed RNG state".into());
    if s.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse::<u128>().map_err(|_| bad())?);
    Ok(rng)
}

/// Serializes `state` into the container format.
pub fn encode_checkpoint<T: Scalar>(state: &ModelState<T>, config_hash: &str) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(state.store.len());
    let mut offset = 0;
    for (name, p) in state.store.iter() {
        tensors.push(TensorEntry { name: name.clone(), group: p.group, shape: p.tensor.shape().to_vec(), offset });
        for v in p.tensor.values() {
            payload.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        offset += p.tensor.len();
    }
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        dims: state.dims.clone(),
        tensors,
        payload_values: offset,
        payload_sha256: hex(&Sha256::digest(&payload)),
        norms: state.norms.clone(),
        seed_groups: state.seed_groups.clone(),
        trained_tasks: state.trained_tasks,
        rng: rng_state(&state.rng),
        eval_seed: state.eval_seed,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::State(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a container, verifying version, lengths and the payload hash.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ModelState<T>, Manifest)> {
    let short = || Error::Checksum("file is truncated".into());
    if bytes.len() < 20 {
        return Err(short());
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checksum("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < mlen {
        return Err(short());
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen]).map_err(|e| Error::Checksum(format!("manifest unreadable: {e}")))?;
    let payload = &body[mlen..];
    if payload.len() != manifest.payload_values * 8 {
        return Err(Error::Checksum(format!("payload holds {} bytes, manifest expects {}", payload.len(), manifest.payload_values * 8)));
    }
    if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(Error::Checksum("payload hash mismatch".into()));
    }
    let value = |i: usize| f64::from_le_bytes(payload[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset + n > manifest.payload_values {
            return Err(Error::Checksum(format!("tensor {} exceeds the payload", e.name)));
        }
        let vals = (e.offset..e.offset + n).map(|i| T::of(value(i))).collect();
        store.insert(e.name.clone(), e.group, Tensor::new(e.shape.clone(), vals)?)?;
    }
    let dims = manifest.dims.clone();
    let (reconstructors, predictors) = ModelState::<T>::experts(&dims);
    let state = ModelState {
        autoencoder: PretrainAutoencoder::new(dims.week_len, dims.pretrain_hidden, dims.pretrain_latent),
        dims,
        store,
        reconstructors,
        predictors,
        norms: manifest.norms.clone(),
        seed_groups: manifest.seed_groups.clone(),
        trained_tasks: manifest.trained_tasks,
        rng: restore_rng(&manifest.rng)?,
        eval_seed: manifest.eval_seed,
    };
    Ok((state, manifest))
}

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, config_hash: &str, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state, config_hash)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelState<T>, Manifest)> {
    decode_checkpoint(&std::fs::read(path)?)
}
