//! Core library for a discriminative Gaussian process latent variable model
//! with asymmetric multi-task coupling, usable as a pairwise binary
//! classifier or a codebook feature extractor, with anchor-based low-rank
//! approximations for larger datasets.

pub mod anchors;
pub mod cluster;
pub mod error;
pub mod gplvm;
pub mod kernel;
pub mod kfda;
pub mod laplace;
pub mod model;
pub mod model_io;
pub mod pairfile;
pub mod pipeline;
pub mod scg;
pub mod stats;

pub use error::{Error, Result};
pub use kernel::{HyperParams, KernelMatrix};
pub use model::{
    DomainData, LatentState, ModelConfig, MtlData, Prediction, Predictor, TrainedModel,
};
