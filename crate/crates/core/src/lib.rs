//! Prompt-tuned audio-visual transformer on a frozen, modality-shared
//! backbone.

pub mod ablation;
pub mod backbone;
pub mod check;
pub mod config;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use tensor::{Gradients, ParamId, Tape, Tensor, Var};
