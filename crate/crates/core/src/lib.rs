pub mod autodiff;
pub mod bench;
pub mod config;
pub mod correlation;
pub mod deformable;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
