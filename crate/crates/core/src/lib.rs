pub mod analysis;
pub mod autodiff;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod dssa;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod mcp;
pub mod model;
pub mod params;
pub mod signal_tfr;
pub mod tensor;
pub mod train;

pub use error::{Result, ScptError};
pub use tensor::Matrix;
