//! Attention scores from lookups instead of multiply-adds.
//!
//! Keys are product-quantized per head into 4-bit codes ([`quantizer`]) and
//! stored in a transposed, 32-key blocked layout ([`keycache`]). For each
//! query, dot products with every centroid are quantized into 16-entry 8-bit
//! tables ([`lut`]) that fit a 128-bit register, and [`kernel`] scores all
//! cached keys with byte shuffles and 16-bit adds. [`reference`] holds the
//! exact and 8-bit PQ baselines, [`evalbench`] the quality and latency
//! harnesses, and [`format`] the on-disk files.

pub mod error;
pub mod evalbench;
pub mod format;
pub mod kernel;
pub mod keycache;
pub mod kmeans;
pub mod lut;
pub mod quantizer;
pub mod reference;

pub use error::{Error, FormatErrorKind, Result};
pub use kernel::{
    accumulate_block, accumulate_cache, detect_fast_path, nomad_logits, nomad_scores, score_cached,
    AccumulatorBatch, KernelPath, ScoreVector,
};
pub use keycache::{unpack_row, BlockView, KeyCodeCache};
pub use lut::{build_lut, QuantizedLut, QueryView};
pub use quantizer::{learn_codebook, Codebook, KeyCodes, PqConfig};
