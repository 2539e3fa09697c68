//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "DVAECKPT"
//! version   u32
//! hdr_len   u64
//! header    hdr_len bytes of UTF-8 JSON (configs, metadata, tensor table)
//! tensors   f64 values, row-major, in header order
//! checksum  u64 FNV-1a over header and tensor bytes
//! ```

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhancement::EnhancementParams;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::noise_model::{init_noise_params, NoiseConfig, NoiseParams, NoiseVariant};
use crate::optim::{Adam, AdamConfig};
use crate::signal::StftConfig;
use crate::speech_prior::{RvaeConfig, RvaeParams};
use crate::train::{TrainConfig, TrainLog, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DVAECKPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointRole {
    RvaePretrained,
    NdTrained,
}

impl CheckpointRole {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointRole::RvaePretrained => "rvae_pretrained",
            CheckpointRole::NdTrained => "nd_trained",
        }
    }
}

impl fmt::Display for CheckpointRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// `None` until an epoch has been validated.
    pub best_valid_loss: Option<f64>,
    pub seed: u64,
    pub log: TrainLog,
}

/// Optimizer state and best-so-far parameters, present only in checkpoints
/// written for resuming.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeData {
    pub adam: Adam,
    pub best_rvae: RvaeParams,
    pub best_noise: Option<NoiseParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: CheckpointRole,
    pub variant: Option<NoiseVariant>,
    pub rvae: RvaeParams,
    pub noise: Option<NoiseParams>,
    pub stft: StftConfig,
    pub train: TrainConfig,
    pub meta: TrainingMeta,
    pub resume: Option<ResumeData>,
}

fn meta_of<P>(state: &TrainState<P>, cfg: &TrainConfig) -> TrainingMeta {
    TrainingMeta {
        epochs_run: state.epoch,
        best_epoch: state.best_epoch,
        best_valid_loss: state.best_valid_loss.is_finite().then_some(state.best_valid_loss),
        seed: cfg.seed,
        log: state.log.clone(),
    }
}

impl Checkpoint {
    /// Pre-trained speech model. With `resumable` the current parameters and
    /// optimizer state are stored; otherwise the best parameters.
    pub fn from_pretrain(state: &TrainState<RvaeParams>, train: &TrainConfig, stft: &StftConfig, resumable: bool) -> Self {
        Self {
            role: CheckpointRole::RvaePretrained,
            variant: None,
            rvae: if resumable { state.params.clone() } else { state.best.clone() },
            noise: None,
            stft: *stft,
            train: train.clone(),
            meta: meta_of(state, train),
            resume: resumable.then(|| ResumeData { adam: state.adam.clone(), best_rvae: state.best.clone(), best_noise: None }),
        }
    }

    /// Noise-dependent model, see [`Checkpoint::from_pretrain`].
    pub fn from_nd(state: &TrainState<EnhancementParams>, train: &TrainConfig, stft: &StftConfig, resumable: bool) -> Self {
        let params = if resumable { &state.params } else { &state.best };
        Self {
            role: CheckpointRole::NdTrained,
            variant: Some(params.variant()),
            rvae: params.rvae.clone(),
            noise: Some(params.noise.clone()),
            stft: *stft,
            train: train.clone(),
            meta: meta_of(state, train),
            resume: resumable.then(|| ResumeData {
                adam: state.adam.clone(),
                best_rvae: state.best.rvae.clone(),
                best_noise: Some(state.best.noise.clone()),
            }),
        }
    }

    pub fn expect_role(&self, role: CheckpointRole) -> Result<()> {
        if self.role == role {
            Ok(())
        } else {
            Err(Error::RoleMismatch { expected: role.name(), found: self.role.to_string() })
        }
    }

    pub fn enhancement_params(&self) -> Result<EnhancementParams> {
        self.expect_role(CheckpointRole::NdTrained)?;
        let noise = self.noise.clone().ok_or_else(|| Error::CorruptCheckpoint("ND checkpoint without noise parameters".into()))?;
        Ok(EnhancementParams { rvae: self.rvae.clone(), noise })
    }

    fn restore<P: Clone>(&self, params: P, best: P) -> Result<TrainState<P>> {
        let resume = self
            .resume
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("checkpoint carries no optimizer state; cannot resume".into()))?;
        Ok(TrainState {
            params,
            adam: resume.adam.clone(),
            epoch: self.meta.epochs_run,
            best,
            best_epoch: self.meta.best_epoch,
            best_valid_loss: self.meta.best_valid_loss.unwrap_or(f64::INFINITY),
            log: self.meta.log.clone(),
        })
    }

    pub fn pretrain_state(&self) -> Result<TrainState<RvaeParams>> {
        self.expect_role(CheckpointRole::RvaePretrained)?;
        let best = self.resume.as_ref().map(|r| r.best_rvae.clone()).unwrap_or_else(|| self.rvae.clone());
        self.restore(self.rvae.clone(), best)
    }

    pub fn nd_state(&self) -> Result<TrainState<EnhancementParams>> {
        let params = self.enhancement_params()?;
        let best = match &self.resume {
            Some(ResumeData { best_rvae, best_noise: Some(n), .. }) => EnhancementParams { rvae: best_rvae.clone(), noise: n.clone() },
            _ => return Err(Error::CorruptCheckpoint("resume data without best noise parameters".into())),
        };
        self.restore(params, best)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Array2<f64>)> = Vec::new();
        self.rvae.visit("rvae.", &mut |n, a| tensors.push((n, a)));
        if let Some(noise) = &self.noise {
            noise.visit("noise.", &mut |n, a| tensors.push((n, a)));
        }
        let mut adam = None;
        if let Some(r) = &self.resume {
            r.best_rvae.visit("best.rvae.", &mut |n, a| tensors.push((n, a)));
            if let Some(noise) = &r.best_noise {
                noise.visit("best.noise.", &mut |n, a| tensors.push((n, a)));
            }
            for (i, (m, v)) in r.adam.m.iter().zip(&r.adam.v).enumerate() {
                tensors.push((format!("adam.m.{i}"), m));
                tensors.push((format!("adam.v.{i}"), v));
            }
            adam = Some(AdamHeader { config: r.adam.config, t: r.adam.t, moments: r.adam.m.len() });
        }
        let header = Header {
            role: self.role,
            variant: self.variant,
            rvae: self.rvae.config,
            noise: self.noise.as_ref().map(|n| n.config),
            stft: self.stft,
            train: self.train.clone(),
            meta: self.meta.clone(),
            adam,
            best_noise: self.resume.as_ref().is_some_and(|r| r.best_noise.is_some()),
            tensors: tensors.iter().map(|(n, a)| TensorEntry { name: n.clone(), rows: a.nrows(), cols: a.ncols() }).collect(),
        };
        let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let n_values: usize = tensors.iter().map(|(_, a)| a.len()).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + 8 * n_values + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, a) in &tensors {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out[20..]);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 20 {
            return Err(corrupt("file too short for a checkpoint header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes; not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let hdr_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let hdr_end = 20usize
            .checked_add(usize::try_from(hdr_len).map_err(|_| corrupt("header length out of range"))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..hdr_end]).map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;
        let n_values: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        let expected_len = hdr_end + 8 * n_values + 8;
        if bytes.len() != expected_len {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {expected_len} bytes, found {} (truncated or padded file)",
                bytes.len()
            )));
        }
        let stored = u64::from_le_bytes(bytes[expected_len - 8..].try_into().unwrap());
        if stored != fnv1a(&bytes[20..expected_len - 8]) {
            return Err(corrupt("checksum mismatch"));
        }

        let mut table: HashMap<String, Array2<f64>> = HashMap::new();
        let mut offset = hdr_end;
        for t in &header.tensors {
            let values: Vec<f64> = bytes[offset..offset + 8 * t.rows * t.cols]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 8 * values.len();
            let a = Array2::from_shape_vec((t.rows, t.cols), values).expect("sized from the table");
            if table.insert(t.name.clone(), a).is_some() {
                return Err(Error::CorruptCheckpoint(format!("duplicate tensor `{}`", t.name)));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rvae = RvaeParams::new(header.rvae, &mut rng);
        fill(&mut rvae, "rvae.", &mut table)?;
        let make_noise = |rng: &mut ChaCha8Rng| -> Result<NoiseParams> {
            match (header.variant, header.noise) {
                (Some(v), Some(c)) => Ok(init_noise_params(v, c, 1.0, rng)),
                _ => Err(corrupt("noise parameters without variant or config")),
            }
        };
        let noise = match header.noise {
            Some(_) => {
                let mut n = make_noise(&mut rng)?;
                fill(&mut n, "noise.", &mut table)?;
                Some(n)
            }
            None => None,
        };
        let resume = match header.adam {
            Some(a) => {
                let mut best_rvae = RvaeParams::new(header.rvae, &mut rng);
                fill(&mut best_rvae, "best.rvae.", &mut table)?;
                let best_noise = if header.best_noise {
                    let mut n = make_noise(&mut rng)?;
                    fill(&mut n, "best.noise.", &mut table)?;
                    Some(n)
                } else {
                    None
                };
                let mut take = |name: String| table.remove(&name).ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor `{name}`")));
                let mut m = Vec::with_capacity(a.moments);
                let mut v = Vec::with_capacity(a.moments);
                for i in 0..a.moments {
                    m.push(take(format!("adam.m.{i}"))?);
                    v.push(take(format!("adam.v.{i}"))?);
                }
                Some(ResumeData { adam: Adam { config: a.config, m, v, t: a.t }, best_rvae, best_noise })
            }
            None => None,
        };
        if let Some(name) = table.keys().next() {
            return Err(Error::CorruptCheckpoint(format!("unexpected tensor `{name}`")));
        }
        header.stft.validate().map_err(|e| Error::CorruptCheckpoint(format!("stft config: {e}")))?;
        Ok(Self {
            role: header.role,
            variant: header.variant,
            rvae,
            noise,
            stft: header.stft,
            train: header.train,
            meta: header.meta,
            resume,
        })
    }

    /// Writes to a temporary file in the target directory, then renames it
    /// into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    c.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    t: u64,
    moments: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    role: CheckpointRole,
    variant: Option<NoiseVariant>,
    rvae: RvaeConfig,
    noise: Option<NoiseConfig>,
    stft: StftConfig,
    train: TrainConfig,
    meta: TrainingMeta,
    adam: Option<AdamHeader>,
    best_noise: bool,
    tensors: Vec<TensorEntry>,
}

fn fill<M: Module>(m: &mut M, prefix: &str, table: &mut HashMap<String, Array2<f64>>) -> Result<()> {
    let mut err = None;
    m.visit_mut(prefix, &mut |name, dst| {
        if err.is_some() {
            return;
        }
        match table.remove(&name) {
            Some(src) if src.dim() == dst.dim() => *dst = src,
            Some(src) => {
                err = Some(Error::CorruptCheckpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.dim(),
                    dst.dim()
                )))
            }
            None => err = Some(Error::CorruptCheckpoint(format!("missing tensor `{name}`"))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
