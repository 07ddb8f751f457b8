pub mod analysis;
pub mod cli;
pub mod divergence;
pub mod error;
pub mod rng;
pub mod sde;
pub mod semigroup;
pub mod targets;

pub use error::{Error, Result};
