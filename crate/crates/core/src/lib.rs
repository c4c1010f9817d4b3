pub mod analysis;
pub mod diffcore;
pub mod embedstore;
pub mod data;
pub mod error;
pub mod evalmetrics;
pub mod losses;
pub mod retrieval;
pub mod synthetic;
pub mod trainer;
pub mod vagfem;

pub use error::{Error, Result};
