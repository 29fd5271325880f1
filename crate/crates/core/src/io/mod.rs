//! On-disk formats: motion files, checkpoints, corpora and the synthetic
//! clip generator.

mod checkpoint;
mod corpus;
mod mseq;
mod npy;
mod synth;

pub use checkpoint::{Checkpoint, CheckpointManifest, ScheduleInfo, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use corpus::{
    humanml3d_caption, humanml3d_to_relative, ingest_corpus, Corpus, CorpusClip, CorpusManifest, CorpusSource, ManifestEntry,
    HUMANML3D_FPS,
};
pub use mseq::{
    decode_mseq, encode_mseq, read_meta, read_mseq, sidecar_path, write_meta, write_mseq, ClipMeta, MSEQ_MAGIC, MSEQ_VERSION,
};
pub use npy::{encode_npy_f32, parse_npy};
pub use synth::{synth_clip, synth_corpus, write_corpus, SynthClip, SynthConfig, SynthKind};
