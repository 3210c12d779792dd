//! Episodic few-shot learning with a category traversal module.
//!
//! Backbone features of the whole support set are condensed per class,
//! traversed across classes into a task-specific channel mask, and applied
//! to support and query embeddings before metric comparison.

pub mod backbone;
pub mod config;
pub mod ctm;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod heads;
pub mod image;
pub mod model;
pub mod synth;
pub mod verify;

pub use config::Config;
pub use episodes::{DatasetIndex, Episode, EpisodeSource, EpisodeSpec, Split};
pub use error::{Error, Result};
pub use model::ModelConfig;
