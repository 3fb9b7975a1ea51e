//! Minimal neural-network substrate with hand-written backward passes.

mod checkpoint;
mod gru;
mod layers;
mod mat;
mod network;
mod optim;

pub use checkpoint::{params_hash, Checkpoint, ParamBlob, TrainingState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gru::{GruCache, GruCell};
pub use layers::{receptive_field, sigmoid, Act, CausalConv, Dense, LayerKind, LayerSpec, Param, Parameterized};
pub use mat::{gemm, matmul, Mat};
pub use network::{ForwardCache, Layer, Network};
pub use optim::{adam_step, clip_grad_norm, grad_check, softmax_cross_entropy, softmax_rows, Adam};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error at layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
