//! Ray-based Gaussian grouping and relaxed-rigidity regularizers for dynamic
//! Gaussian splatting, on top of a small differentiable software rasterizer.

pub mod config;
pub mod error;
pub mod grouping;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod oracle;
pub mod rasterizer;
pub mod scenes;
pub mod spectral;
pub mod streaming_stats;
pub mod trainer;
pub mod types;
pub mod verify;

pub use error::{Error, Result};
