pub mod arap;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod mesh;
pub mod nn;
pub mod ot;
pub mod sparse;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
