//! Data and artifact plumbing: synthetic datasets, binary containers,
//! checkpoints, token streams, configuration files and metrics.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod files;
pub mod synth;
pub mod tokens;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::{parse_kv, RunConfig, SEED_ENV};
pub use container::{decode_tensor, encode_tensor, Dtype};
pub use files::{
    as_clip_batch, atomic_write, decode_file, decode_stream, encode_clip, encode_file, metrics_report, psnr,
    read_checkpoint, read_tensor_file, write_checkpoint, write_tensor_file, CompressionSummary, Metrics, PSNR_CAP,
};
pub use synth::{moving_shape_boxes, synth_dataset, Rect, Sample, SynthKind, NUM_CLASSES};
pub use tokens::TokenStream;
