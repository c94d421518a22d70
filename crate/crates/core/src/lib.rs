pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod selftest;
pub mod style;
pub mod tensor;
pub mod training;
pub mod tts;
pub mod world;

pub use error::{Error, Result};
pub use tensor::{Float, ParamId, ParamStore, Segments, Tape, Tensor, Var};
