pub mod error;
pub mod nncore;
pub mod actionhead;
pub mod bench;
pub mod cli;
pub mod diffusion;
pub mod gradsuite;
pub mod perception;
pub mod pipeline;
pub mod simenv;

pub use error::{Error, Result};
