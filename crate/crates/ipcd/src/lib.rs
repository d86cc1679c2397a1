//! File formats, dataset layout, configuration and the `ipcd` command line
//! around [`ipcd_core`].

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod ply;

pub use error::{IpcdError, Result};
