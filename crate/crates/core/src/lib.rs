pub mod basis;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod tasks;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
