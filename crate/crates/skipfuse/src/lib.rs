//! Cross-modal skip-connected fusion at toy scale.
//!
//! The crate bundles a small tape-based autodiff tensor library, unimodal
//! image/text encoders, four fusion-network topologies, the four joint
//! pretraining objectives, and a perf lab (analytical FLOP model, forward
//! benchmarks, stride sweeps, distributed-memory estimates) behind one CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod perf;
pub mod queue;
pub mod tape;
pub mod tensor;

pub use config::{LossWeights, ModelConfig};
pub use fusion::FusionVariant;
pub use model::Model;
pub use error::{Error, Result};
pub use tape::{Param, Tape, Val};
pub use tensor::{Element, Tensor};
