pub mod archive;
pub mod config;
pub mod error;
pub mod forge;
pub mod metrics;
pub mod mole;
pub mod params;
pub mod spectra;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
