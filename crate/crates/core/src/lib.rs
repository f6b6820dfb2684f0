//! Multi-chart ("unbalanced atlas") self-supervised encoders.
//!
//! An encoder produces `n` chart embeddings and a membership distribution
//! over charts for every input. Training contrasts the mean of the chart
//! embeddings against local features of the next frame while pushing the
//! membership away from uniform; at inference the chart with the largest
//! membership is used. The crate covers configuration, the math kernels,
//! the model, objectives, synthetic data, the training loop and linear
//! probing.

pub mod atlasmath;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kv;
pub mod losses;
pub mod model;
pub mod probe;
pub mod propsuite;
pub mod train;

pub use config::{validate_config, AtlasConfig, FusionMode, Pipeline, RunConfig};
pub use error::{Error, Result};
pub use losses::LossBreakdown;
pub use model::{AtlasBatch, AtlasEncoder, AtlasOutput, LocalFeatureMap};
