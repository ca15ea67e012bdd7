pub mod config;
pub mod corpus;
pub mod cost;
pub mod error;
pub mod eval;
pub mod lm;
pub mod mixture;
pub mod pipeline;
pub mod routing;
mod seed;
pub mod tensorfile;
pub mod tfidf;

pub use error::{Error, Result};
