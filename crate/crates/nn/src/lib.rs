//! Minimal CPU building blocks for convolutional encoders.
//!
//! Every layer exposes a pure `forward` that returns its output together with
//! whatever it needs to cache for the backward pass, and a `backward` that
//! accumulates parameter gradients in place and returns the input gradient.
//! Feature maps are stored channels-last (`B x H x W x C`) so that a
//! convolution output row is exactly one spatial location.

pub mod activation;
pub mod adam;
pub mod conv;
pub mod init;
pub mod linear;
pub mod param;
pub mod pool;
pub mod resblock;

pub use adam::{Adam, AdamConfig, MomentState};
pub use conv::{Conv2d, Conv2dCache};
pub use linear::{Linear, LinearCache};
pub use param::{Param, ParamSet};
pub use pool::GlobalAvgPool;
pub use resblock::{ResBlock, ResBlockCache};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {layer}: expected {expected}, got {actual}")]
    Shape {
        layer: &'static str,
        expected: String,
        actual: String,
    },
    #[error("invalid layer configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
