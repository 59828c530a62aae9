pub mod checkpoint;
pub mod config;
pub mod cpl;
pub mod env;
pub mod error;
pub mod objective;
pub mod oracle;
pub mod perception;
pub mod policy;
pub mod report;
pub mod rng;
pub mod trace_io;
pub mod trainer;

pub use error::{Error, Result};
