//! Corpus ingestion: a directory of `MSEQ1` clips with sidecars, or a
//! HumanML3D-style tree of `new_joint_vecs/*.npy` and `texts/*.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mseq::{read_meta, read_mseq};
use super::npy::parse_npy;
use crate::error::{Error, Result};
use crate::eval::EvalClip;
use crate::motion::{
    relative_to_global, FeatureLayout, MotionSequence, NormalizationStats, RootConvention, RootIntegration, SkeletonSpec,
    HUMANML3D_NAME,
};
use crate::nn::{TextEmbedding, TextEncoder};
use crate::training::TrainingExample;

/// Frame rate of HumanML3D feature files.
pub const HUMANML3D_FPS: f32 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Mseq,
    HumanMl3d,
}

#[derive(Debug, Clone)]
pub struct CorpusClip {
    pub path: PathBuf,
    /// World units, global root.
    pub motion: MotionSequence<f32>,
    pub prompt: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub source: CorpusSource,
    pub skeleton: SkeletonSpec,
    pub layout: FeatureLayout,
    pub clips: Vec<CorpusClip>,
    /// Per-column statistics over every valid global-root frame.
    pub stats: NormalizationStats<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub prompt: Option<String>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub root: String,
    pub source: CorpusSource,
    pub skeleton: String,
    pub layout_digest: String,
    pub total_frames: usize,
    pub clips: Vec<ManifestEntry>,
    pub stats: NormalizationStats<f32>,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let read = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut out = Vec::new();
    for entry in read {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn corpus_error(root: &Path, problems: Vec<String>) -> Error {
    let shown: Vec<&str> = problems.iter().take(20).map(String::as_str).collect();
    let more = problems.len().saturating_sub(shown.len());
    let mut message = format!("{} problem(s):\n  {}", problems.len(), shown.join("\n  "));
    if more > 0 {
        message.push_str(&format!("\n  ... and {more} more"));
    }
    Error::Corpus {
        path: root.to_path_buf(),
        message,
    }
}

/// Shifts the root block of a HumanML3D feature row sequence by one frame:
/// its row `i` holds the change from frame `i` to `i + 1`, while relative
/// clips here store at row `i` the change into frame `i`, with frame 0 at
/// the origin facing `+z`.
pub fn humanml3d_to_relative(features: &Array2<f64>) -> Array2<f64> {
    let mut out = features.clone();
    for i in (0..features.nrows()).rev() {
        for c in 0..3 {
            out[[i, c]] = if i == 0 { 0.0 } else { features[[i - 1, c]] };
        }
    }
    out
}

/// First caption of a HumanML3D text file (`caption#tokens#from#to` lines).
pub fn humanml3d_caption(text: &str) -> Option<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .find(|c| !c.is_empty())
        .map(str::to_string)
}

fn ingest_mseq(files: &[PathBuf], skel: &SkeletonSpec, layout: &FeatureLayout) -> (Vec<CorpusClip>, Vec<String>) {
    let mut clips = Vec::new();
    let mut problems = Vec::new();
    for path in files {
        let loaded = read_mseq(path).and_then(|seq| {
            let meta = read_meta(path)?;
            if SkeletonSpec::by_name(&meta.skeleton)?.name != skel.name {
                return Err(Error::Invalid(format!("skeleton `{}` differs from `{}`", meta.skeleton, skel.name)));
            }
            if seq.width() != layout.width() {
                return Err(Error::Shape(format!("{} columns, layout has {}", seq.width(), layout.width())));
            }
            let global = match seq.convention() {
                RootConvention::GlobalRoot => seq,
                RootConvention::RelativeRoot => relative_to_global(&seq, RootIntegration::Rotated)?,
            };
            Ok((global, meta.prompt))
        });
        match loaded {
            Ok((motion, prompt)) => clips.push(CorpusClip {
                path: path.clone(),
                motion,
                prompt,
            }),
            Err(e) => problems.push(format!("{}: {}", path.display(), strip_path(&e))),
        }
    }
    (clips, problems)
}

fn strip_path(e: &Error) -> String {
    match e {
        Error::Corpus { message, .. } => message.clone(),
        other => other.to_string(),
    }
}

fn ingest_humanml3d(root: &Path, layout: &FeatureLayout) -> Result<(Vec<CorpusClip>, Vec<String>)> {
    let files = sorted_files(&root.join("new_joint_vecs"), "npy")?;
    let mut clips = Vec::new();
    let mut problems = Vec::new();
    for path in files {
        let loaded = fs::read(&path)
            .map_err(|e| Error::io("reading", e))
            .and_then(|b| parse_npy(&b))
            .and_then(|raw| {
                if raw.ncols() != layout.width() {
                    return Err(Error::Shape(format!("{} columns, layout has {}", raw.ncols(), layout.width())));
                }
                let rel = MotionSequence::from_frames(humanml3d_to_relative(&raw), HUMANML3D_FPS, RootConvention::RelativeRoot)?;
                relative_to_global(&rel, RootIntegration::Rotated)
            });
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let prompt = fs::read_to_string(root.join("texts").join(format!("{stem}.txt")))
            .ok()
            .and_then(|t| humanml3d_caption(&t));
        match loaded {
            Ok(motion) => clips.push(CorpusClip {
                path: path.clone(),
                motion: motion.cast(),
                prompt,
            }),
            Err(e) => problems.push(format!("{}: {e}", path.display())),
        }
    }
    Ok((clips, problems))
}

/// Loads every clip under `root`, converts it to a global root once and
/// computes normalization statistics. Any unreadable clip fails the whole
/// ingest with a list of the offending files.
pub fn ingest_corpus(root: &Path, skel: &SkeletonSpec) -> Result<Corpus> {
    let layout = FeatureLayout::canonical(skel);
    if !root.is_dir() {
        return Err(Error::Corpus {
            path: root.to_path_buf(),
            message: "not a directory".into(),
        });
    }
    let mseq = sorted_files(root, "mseq")?;
    let (source, (clips, problems)) = if !mseq.is_empty() {
        (CorpusSource::Mseq, ingest_mseq(&mseq, skel, &layout))
    } else if root.join("new_joint_vecs").is_dir() {
        if skel.name != HUMANML3D_NAME {
            return Err(Error::Invalid("HumanML3D features need the humanml3d-22 skeleton".into()));
        }
        (CorpusSource::HumanMl3d, ingest_humanml3d(root, &layout)?)
    } else {
        return Err(Error::Corpus {
            path: root.to_path_buf(),
            message: "no .mseq clips and no new_joint_vecs/ directory".into(),
        });
    };
    if !problems.is_empty() {
        return Err(corpus_error(root, problems));
    }
    if clips.is_empty() {
        return Err(corpus_error(root, vec!["no clips found".into()]));
    }
    let stats = NormalizationStats::from_sequences(clips.iter().map(|c| &c.motion))?;
    Ok(Corpus {
        root: root.to_path_buf(),
        source,
        skeleton: skel.clone(),
        layout,
        clips,
        stats,
    })
}

impl Corpus {
    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            root: self.root.display().to_string(),
            source: self.source,
            skeleton: self.skeleton.name.clone(),
            layout_digest: self.layout.digest(),
            total_frames: self.clips.iter().map(|c| c.motion.valid_length()).sum(),
            clips: self
                .clips
                .iter()
                .map(|c| ManifestEntry {
                    file: c
                        .path
                        .strip_prefix(&self.root)
                        .unwrap_or(&c.path)
                        .display()
                        .to_string(),
                    prompt: c.prompt.clone(),
                    frames: c.motion.valid_length(),
                })
                .collect(),
            stats: self.stats.clone(),
        }
    }

    /// Seeded split into training and held-out clip indices.
    pub fn split(&self, holdout: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.clips.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let holdout = holdout.min(idx.len());
        let test = idx.split_off(idx.len() - holdout);
        let (mut train, mut test) = (idx, test);
        train.sort_unstable();
        test.sort_unstable();
        (train, test)
    }

    /// Normalized clips cropped or padded to `rows` frames.
    pub fn training_examples(
        &self,
        indices: &[usize],
        stats: &NormalizationStats<f32>,
        rows: usize,
        text: &dyn TextEncoder,
    ) -> Result<Vec<TrainingExample<f32>>> {
        indices
            .iter()
            .map(|&i| {
                let clip = &self.clips[i];
                let seq = stats.normalize(&clip.motion.pad_or_trim(rows)?)?;
                let text = match &clip.prompt {
                    Some(p) => TextEmbedding::from_vec(text.encode_vec(p).into_iter().map(|v| v as f32).collect()),
                    None => TextEmbedding::null(text.width()),
                };
                Ok(TrainingExample {
                    valid_length: seq.valid_length(),
                    motion: seq.into_data(),
                    text,
                })
            })
            .collect()
    }

    pub fn eval_clips(&self, indices: &[usize]) -> Vec<EvalClip<f32>> {
        indices
            .iter()
            .map(|&i| EvalClip {
                motion: self.clips[i].motion.clone(),
                prompt: self.clips[i].prompt.clone(),
            })
            .collect()
    }
}
