//! Minimal dense autodiff used by the process-model crates.
//!
//! Everything is `f64` and two-dimensional. Sequences are handled by callers
//! as time-major stacks of `batch × features` matrices.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{embedding_table, BoundLstm, GruCell, Linear, LstmCell};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, NamedTensor, ParamId, ParamMask, ParamStore};
pub use tape::{sigmoid, softplus, Graph, Var};

pub type Mat = ndarray::Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}
