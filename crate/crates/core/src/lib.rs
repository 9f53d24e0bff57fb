//! Multi-hop question generation over pairs of documents.

pub mod corpus;
pub mod encoding;
pub mod error;
pub mod graph;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod par;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

pub use error::{QgError, Result};
