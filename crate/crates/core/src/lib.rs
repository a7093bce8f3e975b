//! Neural machine translation engine built around parallel encoder
//! topologies.
//!
//! The encoder of a standard stacked transformer is replaced by independently
//! parameterized encoder branches that run concurrently and are merged by
//! addition (`apa`), concatenation plus a learned reduction (`acpa`), or
//! addition followed by a final attending layer (`aapa`). The crate carries
//! everything needed to train and evaluate the four variants on translation
//! tasks: an f64 tensor core with reverse-mode autodiff, the transformer
//! blocks, KL-divergence training with Adam and greedy decoding, corpus-level
//! BLEU, and critical-path/wall-clock instrumentation.

pub mod attention;
pub mod blocks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
