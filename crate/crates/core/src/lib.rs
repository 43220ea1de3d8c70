pub mod analysis;
pub mod backbone;
pub mod bridges;
pub mod cli;
pub mod data;
pub mod error;
pub mod latent_map;
pub mod pets;
pub mod pipeline;
pub mod snapshot;
pub mod spline;
pub mod tensor;

pub use error::{Error, Result};
