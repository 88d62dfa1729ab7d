pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod models;
pub mod numerics;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
