pub mod autograd;
pub mod corpus;
pub mod dataloader;
pub mod distillation;
pub mod error;
pub mod evaluation;
pub mod extensions;
pub mod gradcheck;
pub mod model;
pub mod registry;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
