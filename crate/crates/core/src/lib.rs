//! Annotating text corpora with chat language models and scoring the
//! results against gold labels.

pub mod corpus;
pub mod inference;
pub mod metrics;
pub mod mock;
pub mod model;
pub mod normalize;
pub mod prompt;
pub mod runner;
pub mod template;
