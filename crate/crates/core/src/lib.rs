//! Query-based referring segmentation with bidirectional semantic flow.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod fstn;
pub mod gradcheck;
pub mod gradsuite;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod refine;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Activation, Tape, Var};
pub use tensor::{pool3, PoolKind, Tensor};
