//! Historical-context news forecasting with prefix summary contexts.

pub mod corpus;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod portfolio;
pub mod retrieval;
pub mod text;
pub mod training;

pub use error::{Error, Result};
