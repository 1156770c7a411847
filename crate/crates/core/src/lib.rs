//! Anomalous sound detection with a transformer encoder adapted through
//! fully connected multi-branch LoRA and machine-aware group adapters, trained
//! with an angular-margin loss plus a codebook/memory-bank contrastive term,
//! and scored by nearest-neighbour cosine distance.

pub mod audio;
pub mod backend;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fclora;
pub mod features;
pub mod groupadapter;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod plots;
pub mod synthdata;
pub mod train;

pub use config::RunConfig;
pub use error::{AsdError, Result};
