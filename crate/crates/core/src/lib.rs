pub mod baseline_ae;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod irt;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod provenance;
pub mod synthgen;
pub mod train;
pub mod transfer;
pub mod viz;

pub use error::{Error, Result};
