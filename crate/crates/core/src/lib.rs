pub mod error;
pub mod rng;
pub mod augment;
pub mod eval;
pub mod modality;
pub mod net;
pub mod trackio;

pub use error::{Error, Result};
