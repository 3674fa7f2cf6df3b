//! Content-adaptive filtering of stereo cost volumes: correlation volumes,
//! segmentation-aware bilateral, dynamic, pixel-adaptive and semi-global
//! filters with analytic gradients, soft-argmin regression, metrics, file
//! formats and a toy training loop.

pub mod cost_volume;
pub mod dfn;
pub mod disparity;
pub mod error;
pub mod features;
pub mod io;
pub mod nn;
pub mod pac;
pub mod sabf;
pub mod sga;
pub mod tensor;
pub mod metrics;
pub mod regression;
pub mod model;
pub mod train;
pub mod gradcheck;
pub mod cli;

pub use disparity::DisparityMap;
pub use error::{Error, Result};
pub use model::{FilterKind, Model, ModelConfig};
pub use tensor::{Real, Tensor, WindowSpec};
