//! Self-describing model checkpoints.
//!
//! Layout: the magic `CMDI`, a little-endian `u32` format version, a `u32`
//! manifest length, the JSON manifest, then every tensor as little-endian
//! `f32` in manifest order. Weights come first, EMA weights (if any) after.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::motion::{hex, FeatureLayout, NormalizationStats, SkeletonSpec};
use crate::nn::{DenoiserConfig, ParamStore, UNet};
use crate::training::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMDI";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub kind: ScheduleKind,
    pub steps: usize,
    /// SHA-256 over the bit patterns of `ᾱ_0..=ᾱ_T`.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: DenoiserConfig,
    pub skeleton: String,
    pub layout_digest: String,
    pub schedule: ScheduleInfo,
    pub stats: NormalizationStats<f32>,
    #[serde(default)]
    pub training: Option<TrainConfig>,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub ema_tensors: Vec<TensorEntry>,
    /// SHA-256 over the tensor payload.
    pub payload_digest: String,
}

/// A trained model together with everything needed to sample from it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore<f32>,
    pub ema: Option<ParamStore<f32>>,
}

fn entries(store: &ParamStore<f32>) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|(name, v)| TensorEntry {
            name: name.to_string(),
            shape: [v.nrows(), v.ncols()],
        })
        .collect()
}

fn push_store(out: &mut Vec<u8>, store: &ParamStore<f32>) {
    for v in store.values() {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn read_store(entries: &[TensorEntry], payload: &[u8], cursor: &mut usize) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for e in entries {
        let count = e.shape[0] * e.shape[1];
        let end = *cursor + 4 * count;
        let bytes = payload
            .get(*cursor..end)
            .ok_or_else(|| Error::Format(format!("tensor `{}` runs past the end of the file", e.name)))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), values).map_err(|err| Error::Format(err.to_string()))?;
        if store.id(&e.name).is_some() {
            return Err(Error::Format(format!("tensor `{}` listed twice", e.name)));
        }
        store.insert(e.name.clone(), arr);
        *cursor = end;
    }
    Ok(store)
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &UNet<f32>,
        ema: Option<&ParamStore<f32>>,
        schedule: &NoiseSchedule,
        stats: &NormalizationStats<f32>,
        skeleton: &SkeletonSpec,
        layout: &FeatureLayout,
        training: Option<TrainConfig>,
        step: u64,
    ) -> Result<Self> {
        if let Some(e) = ema {
            model.params().check_layout(e)?;
        }
        if stats.width() != model.config().feature_width || layout.width() != model.config().feature_width {
            return Err(Error::Shape("stats, layout and model disagree on feature width".into()));
        }
        let mut ckpt = Self {
            manifest: CheckpointManifest {
                model: model.config().clone(),
                skeleton: skeleton.name.clone(),
                layout_digest: layout.digest(),
                schedule: ScheduleInfo {
                    kind: schedule.kind(),
                    steps: schedule.steps(),
                    digest: schedule.digest(),
                },
                stats: stats.clone(),
                training,
                step,
                tensors: entries(model.params()),
                ema_tensors: ema.map(entries).unwrap_or_default(),
                payload_digest: String::new(),
            },
            params: model.params().clone(),
            ema: ema.cloned(),
        };
        ckpt.manifest.payload_digest = hex(&Sha256::digest(ckpt.payload()));
        Ok(ckpt)
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.params.scalar_count() * 2));
        push_store(&mut out, &self.params);
        if let Some(e) = &self.ema {
            push_store(&mut out, e);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.payload());
        Ok(out)
    }

    /// Parses and verifies a checkpoint: payload digest, schedule digest,
    /// skeleton and feature layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let manifest_bytes = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Format("manifest runs past the end of the file".into()))?;
        let manifest: CheckpointManifest = serde_json::from_slice(manifest_bytes)?;
        let payload = &bytes[12 + len..];
        let actual = hex(&Sha256::digest(payload));
        if actual != manifest.payload_digest {
            return Err(Error::DigestMismatch {
                what: "payload",
                expected: manifest.payload_digest.clone(),
                actual,
            });
        }
        let mut cursor = 0;
        let params = read_store(&manifest.tensors, payload, &mut cursor)?;
        let ema = if manifest.ema_tensors.is_empty() {
            None
        } else {
            Some(read_store(&manifest.ema_tensors, payload, &mut cursor)?)
        };
        if cursor != payload.len() {
            return Err(Error::Format(format!("{} trailing bytes", payload.len() - cursor)));
        }
        let ckpt = Self { manifest, params, ema };
        let schedule = NoiseSchedule::from_kind(ckpt.manifest.schedule.kind, ckpt.manifest.schedule.steps)?;
        let digest = schedule.digest();
        if digest != ckpt.manifest.schedule.digest {
            return Err(Error::DigestMismatch {
                what: "schedule",
                expected: ckpt.manifest.schedule.digest.clone(),
                actual: digest,
            });
        }
        let layout = ckpt.layout()?;
        if layout.digest() != ckpt.manifest.layout_digest {
            return Err(Error::DigestMismatch {
                what: "feature layout",
                expected: ckpt.manifest.layout_digest.clone(),
                actual: layout.digest(),
            });
        }
        ckpt.model(false)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    pub fn skeleton(&self) -> Result<SkeletonSpec> {
        SkeletonSpec::by_name(&self.manifest.skeleton)
    }

    pub fn layout(&self) -> Result<FeatureLayout> {
        Ok(FeatureLayout::canonical(&self.skeleton()?))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_kind(self.manifest.schedule.kind, self.manifest.schedule.steps)
    }

    /// Rebuilds the network, from the EMA weights when asked and present.
    pub fn model(&self, use_ema: bool) -> Result<UNet<f32>> {
        let source = match (&self.ema, use_ema) {
            (Some(e), true) => e,
            _ => &self.params,
        };
        UNet::with_parameters(self.manifest.model.clone(), source.clone())
    }
}
