//! BlockFFN laboratory: a sparse mixture-of-experts FFN with a ReLU+RMSNorm
//! router, chunk-level sparsity objectives, sparsity metrics, a chunk-union
//! inference kernel and a speculative-verification harness.

pub mod decode;
pub mod error;
pub mod ffn;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Real, Tensor2D};
