pub mod cli;
pub mod data;
pub mod error;
pub mod flows;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod variational;
pub mod verify;

pub use error::{Error, Result};
