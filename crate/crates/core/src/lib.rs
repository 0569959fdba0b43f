pub mod autodiff;
pub mod datasets;
pub mod models;
pub mod rng;
pub mod samplers;
pub mod error;
pub mod io;
pub mod learning;
pub mod metrics;
pub mod tensor;

pub use autodiff::{finite_difference_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use models::{LatentState, ModelConfig, ModelTriple, MultimodalBatch, Parameters};
pub use rng::{RngState, RngStream};
pub use tensor::Tensor;
