//! `MSEQ1` motion files and their JSON sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MotionSequence, RootConvention, HUMANML3D_NAME};

pub const MSEQ_MAGIC: &[u8; 4] = b"MSEQ";
pub const MSEQ_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 4 + 1;

pub fn encode_mseq(seq: &MotionSequence<f32>) -> Vec<u8> {
    let (n, f) = seq.data().dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * f);
    out.extend_from_slice(MSEQ_MAGIC);
    out.extend_from_slice(&MSEQ_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&seq.fps().to_le_bytes());
    out.extend_from_slice(&(seq.valid_length() as u32).to_le_bytes());
    out.push(seq.convention().to_byte());
    for v in seq.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mseq(bytes: &[u8]) -> Result<MotionSequence<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MSEQ_MAGIC {
        return Err(Error::Format("not an MSEQ file".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != MSEQ_VERSION {
        return Err(Error::Format(format!("unsupported MSEQ version {version}")));
    }
    let n = u32_at(8) as usize;
    let f = u32_at(12) as usize;
    let fps = f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let valid = u32_at(20) as usize;
    let convention = RootConvention::from_byte(bytes[24])?;
    let expected = HEADER_LEN + 4 * n * f;
    if bytes.len() != expected {
        return Err(Error::Format(format!("payload is {} bytes, header implies {expected}", bytes.len())));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::Format(format!("bad frame rate {fps}")));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let data = Array2::from_shape_vec((n, f), data).map_err(|e| Error::Format(e.to_string()))?;
    MotionSequence::new(data, fps, valid, convention)
}

pub fn write_mseq(path: &Path, seq: &MotionSequence<f32>) -> Result<()> {
    fs::write(path, encode_mseq(seq)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_mseq(path: &Path) -> Result<MotionSequence<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_mseq(&bytes).map_err(|e| Error::Corpus { path: path.to_path_buf(), message: e.to_string() })
}

/// Sidecar next to a motion file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default = "default_skeleton")]
    pub skeleton: String,
}

fn default_skeleton() -> String {
    HUMANML3D_NAME.to_string()
}

/// `clip.mseq` → `clip.meta.json`.
pub fn sidecar_path(motion: &Path) -> PathBuf {
    motion.with_extension("meta.json")
}

pub fn write_meta(motion: &Path, meta: &ClipMeta) -> Result<()> {
    let path = sidecar_path(motion);
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Missing sidecars yield no prompt and the canonical skeleton.
pub fn read_meta(motion: &Path) -> Result<ClipMeta> {
    let path = sidecar_path(motion);
    if !path.exists() {
        return Ok(ClipMeta {
            prompt: None,
            skeleton: default_skeleton(),
        });
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corpus { path, message: e.to_string() })
}
