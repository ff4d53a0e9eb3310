pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod graph_encoder;
pub mod model;
pub mod numeric;
pub mod pretrain;
pub mod prompt;
pub mod tasks;
pub mod text_encoder;

pub use error::{Error, Result};
