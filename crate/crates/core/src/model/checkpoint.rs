//! Binary checkpoint archive: a JSON header carrying every config plus the
//! RNG and optimizer scalars, followed by named f32 tensors for all
//! parameters and optimizer moments. Restoring a checkpoint reproduces the
//! training state exactly, so a resumed run continues bit-identically.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::loss::LossWeights;
use crate::nn::{Adam, AdamSlot, Visit};
use crate::train::{AblationConfig, TrainConfig};

use super::{DepthNetConfig, DerainAeConfig, ModelBundle, ModelError};

const MAGIC: &[u8; 4] = b"DRCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads {VERSION})")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint does not match its declared config: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything a resumed run needs.
pub struct TrainState {
    pub bundle: ModelBundle,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub train_cfg: TrainConfig,
    pub weights: LossWeights,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    derain_cfg: DerainAeConfig,
    depth_cfg: DepthNetConfig,
    ablation: AblationConfig,
    build_seed: u64,
    step: u64,
    adam_lr: f32,
    adam_beta1: f32,
    adam_beta2: f32,
    adam_eps: f32,
    adam_l2: f32,
    adam_t: u64,
    rng: ChaCha8Rng,
    train_cfg: TrainConfig,
    weights: LossWeights,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

fn write_tensor<W: Write>(
    out: &mut W,
    name: &str,
    dims: &[usize],
    data: &[f32],
) -> std::io::Result<()> {
    out.write_all(&(name.len() as u16).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[dims.len() as u8])?;
    for &d in dims {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    out.write_all(&(data.len() as u64).to_le_bytes())?;
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, state: &mut TrainState) -> Result<(), CheckpointError> {
    let header = Header {
        version: VERSION,
        derain_cfg: state.bundle.derain_cfg.clone(),
        depth_cfg: state.bundle.depth_cfg.clone(),
        ablation: state.bundle.ablation,
        build_seed: state.bundle.build_seed,
        step: state.step,
        adam_lr: state.adam.lr,
        adam_beta1: state.adam.beta1,
        adam_beta2: state.adam.beta2,
        adam_eps: state.adam.eps,
        adam_l2: state.adam.l2,
        adam_t: state.adam.t,
        rng: state.rng.clone(),
        train_cfg: state.train_cfg.clone(),
        weights: state.weights.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut param_tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    state.bundle.visit_params("", &mut |p| {
        param_tensors.push((p.name.clone(), p.dims.clone(), p.data.to_vec()));
    });
    let slot_tensors: Vec<(String, Vec<f32>, Vec<f32>)> = state
        .adam
        .slots()
        .map(|(name, slot)| (name.clone(), slot.m.clone(), slot.v.clone()))
        .collect();

    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(header_json.len() as u64).to_le_bytes())?;
        out.write_all(&header_json)?;
        let count = param_tensors.len() + 2 * slot_tensors.len();
        out.write_all(&(count as u64).to_le_bytes())?;
        for (name, dims, data) in &param_tensors {
            write_tensor(&mut out, name, dims, data)?;
        }
        for (name, m, v) in &slot_tensors {
            write_tensor(&mut out, &format!("optim.{name}.m"), &[m.len()], m)?;
            write_tensor(&mut out, &format!("optim.{name}.v"), &[v.len()], v)?;
        }
        out.flush()
    })()
    .map_err(io_err(path))
}

struct TensorReader<R: Read> {
    inner: R,
}

impl<R: Read> TensorReader<R> {
    fn u16(&mut self) -> std::io::Result<u16> {
        let mut b = [0u8; 2];
        self.inner.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u64(&mut self) -> std::io::Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>), CheckpointError> {
        let bad = |what: &str| CheckpointError::Corrupt(format!("truncated tensor {what}"));
        let name_len = self.u16().map_err(|_| bad("name length"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        self.inner.read_exact(&mut name_bytes).map_err(|_| bad("name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let mut ndim = [0u8; 1];
        self.inner.read_exact(&mut ndim).map_err(|_| bad("rank"))?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            dims.push(self.u64().map_err(|_| bad("dims"))? as usize);
        }
        let len = self.u64().map_err(|_| bad("length"))? as usize;
        if dims.iter().product::<usize>() != len {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {name}: dims {dims:?} do not multiply to length {len}"
            )));
        }
        let mut bytes = vec![0u8; len * 4];
        self.inner.read_exact(&mut bytes).map_err(|_| bad("data"))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, dims, data))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, CheckpointError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = TensorReader { inner: BufReader::new(file) };

    let mut magic = [0u8; 4];
    reader
        .inner
        .read_exact(&mut magic)
        .map_err(|_| CheckpointError::Corrupt("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut version = [0u8; 4];
    reader
        .inner
        .read_exact(&mut version)
        .map_err(|_| CheckpointError::Corrupt("missing version".into()))?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let header_len = reader
        .u64()
        .map_err(|_| CheckpointError::Corrupt("missing header length".into()))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader
        .inner
        .read_exact(&mut header_bytes)
        .map_err(|_| CheckpointError::Corrupt("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let count = reader
        .u64()
        .map_err(|_| CheckpointError::Corrupt("missing tensor count".into()))?;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let (name, dims, data) = reader.tensor()?;
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
        }
    }

    let mut bundle = ModelBundle::build(
        header.derain_cfg.clone(),
        header.depth_cfg.clone(),
        header.ablation,
        header.build_seed,
    )?;
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    bundle.visit_params("", &mut |p| match tensors.get(&p.name) {
        Some((dims, data)) if *dims == p.dims => p.data.copy_from_slice(data),
        Some((dims, _)) => {
            mismatched.push(format!("{} (file {dims:?}, model {:?})", p.name, p.dims))
        }
        None => missing.push(p.name.clone()),
    });
    if !missing.is_empty() || !mismatched.is_empty() {
        return Err(CheckpointError::ConfigMismatch(format!(
            "missing tensors {missing:?}, shape mismatches {mismatched:?}"
        )));
    }

    let mut adam = Adam::new(header.adam_lr);
    adam.beta1 = header.adam_beta1;
    adam.beta2 = header.adam_beta2;
    adam.eps = header.adam_eps;
    adam.l2 = header.adam_l2;
    adam.t = header.adam_t;
    let mut param_names: BTreeMap<String, usize> = BTreeMap::new();
    bundle.visit_params("", &mut |p| {
        param_names.insert(p.name.clone(), p.data.len());
    });
    type MomentPair = (Option<Vec<f32>>, Option<Vec<f32>>);
    let mut moments: BTreeMap<String, MomentPair> = BTreeMap::new();
    for (name, (_, data)) in &tensors {
        if let Some(rest) = name.strip_prefix("optim.") {
            let (param, kind) = rest
                .rsplit_once('.')
                .ok_or_else(|| CheckpointError::Corrupt(format!("bad optimizer tensor {name}")))?;
            let expected = param_names.get(param).ok_or_else(|| {
                CheckpointError::ConfigMismatch(format!("optimizer state for unknown {param}"))
            })?;
            if data.len() != *expected {
                return Err(CheckpointError::ConfigMismatch(format!(
                    "optimizer state length for {param}: file {}, model {expected}",
                    data.len()
                )));
            }
            let entry = moments.entry(param.to_string()).or_default();
            match kind {
                "m" => entry.0 = Some(data.clone()),
                "v" => entry.1 = Some(data.clone()),
                other => {
                    return Err(CheckpointError::Corrupt(format!(
                        "unknown optimizer tensor kind {other}"
                    )))
                }
            }
        }
    }
    for (param, (m, v)) in moments {
        let (Some(m), Some(v)) = (m, v) else {
            return Err(CheckpointError::Corrupt(format!(
                "optimizer state for {param} is missing one moment"
            )));
        };
        adam.insert_slot(param, AdamSlot { m, v });
    }

    Ok(TrainState {
        bundle,
        adam,
        step: header.step,
        rng: header.rng,
        train_cfg: header.train_cfg,
        weights: header.weights,
    })
}

/// Loads just the model for inference and evaluation.
pub fn load_bundle(path: &Path) -> Result<ModelBundle, CheckpointError> {
    Ok(load_checkpoint(path)?.bundle)
}

/// Hex SHA-256 of the checkpoint file, used to identify the weights a
/// report was produced from.
pub fn checkpoint_file_hash(path: &Path) -> Result<String, CheckpointError> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(io_err(path))?;
    Ok(hex(&hasher.finalize()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
