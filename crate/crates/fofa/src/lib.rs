//! Std companion: file formats, wire codecs, the device-cloud session
//! simulator, fleet runs, cost reports and experiment drivers.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod experiments;
pub mod fleet;
pub mod ingest;
pub mod privacy;
pub mod session;
pub mod wire;

pub use error::{Error, Result};
