pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod inject;
pub mod lift3d;
pub mod params;
pub mod rng;
pub mod scenegen;
pub mod textenc;

pub use error::{Error, Result};
