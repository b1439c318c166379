pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod finetune;
pub mod provenance;
pub mod seed;
pub mod stylizer;

pub use config::RunConfig;
pub use error::{IssError, Result};
