//! Minimal reverse-mode differentiation engine, the ADAM optimizer, a
//! finite-difference gradient checker and the binary checkpoint format.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    parse_checkpoint, read_checkpoint, serialize_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::grad_check;
pub use graph::{Graph, NormSpan, ParamVars, Var};
pub use tensor::{ParamSet, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backward called twice without resetting gradients")]
    Accumulation,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
