pub mod activation;
pub mod bench;
pub mod clustering;
pub mod datasynth;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod io;
pub mod model;
pub mod refinement;
pub mod retrieval;
pub mod tensor;

pub use error::{Error, Result};
