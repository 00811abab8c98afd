pub mod attention;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod persist;
pub mod quantizer;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod tokens;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use tokens::{Modality, TokenSequence};
