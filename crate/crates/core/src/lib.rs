//! Topographic filter maps for 1D convolutional classifiers.
//!
//! Filters of each convolution layer are laid out on a 2D grid and a
//! neighborhood cosine-similarity penalty pulls grid neighbors toward similar
//! weights. Group-averaged activation profiles can then be shown as images on
//! that grid, smoothed, searched for their most responsive region, and probed
//! with activation-maximizing inputs.

pub mod checks;
pub mod convnet;
pub mod diffkit;
pub mod dream;
pub mod error;
pub mod fileio;
pub mod mapview;
pub mod napkit;
pub mod rng;
pub mod synthphone;
pub mod topogrid;

pub use convnet::{Activation, LayerSpec, Model, ModelConfig, SweepRule, TrainMetrics};
pub use diffkit::{Graph, NodeId, Tensor};
pub use dream::{DreamConfig, DreamResult};
pub use error::{Error, Result};
pub use mapview::{GridMap, Region};
pub use napkit::{Grouping, NapMap, NapMode};
pub use synthphone::{Dataset, SynthConfig};
pub use topogrid::{GridSpec, PenaltySign};
