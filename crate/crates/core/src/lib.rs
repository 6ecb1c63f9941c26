//! Compress the weight difference between a fine-tuned model and its base
//! to 1-bit sign planes with per-matrix scales, refine those scales by logit
//! distillation, and serve many fine-tunes from one shared backbone.

pub mod checkpoint;
pub mod config;
pub mod delta;
pub mod delta_file;
pub mod distill;
pub mod error;
pub mod eval;
pub mod lowrank;
pub mod model;
pub mod quant;
pub mod serve;
pub mod size;
pub mod synth;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint};
pub use config::ToyArchConfig;
pub use delta::{compress_stack, compress_tensor, decompress_tensor, packed_matvec, sign, DeltaStack, PackedSignMatrix};
pub use delta_file::{apply_delta, build_delta_file, DeltaEntry, DeltaFile, QuantPolicy};
pub use error::{Error, ErrorCategory, Result};
pub use tensor::DenseMatrix;
