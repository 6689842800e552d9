pub mod commands;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod latent;
pub mod morph;
pub mod nn;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
