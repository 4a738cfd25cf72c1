pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod gpd;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod runtime;

pub use error::{Error, Result};
