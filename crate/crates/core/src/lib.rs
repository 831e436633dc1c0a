//! Class-aware regularization (CAR) for semantic segmentation.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`Graph`]), ground
//! truth class-center extraction ([`centers`]), the three center-based
//! regularizers ([`losses`]), a synthetic co-occurrence-biased dataset
//! ([`synth`]), a toy convolutional segmenter with a deterministic trainer
//! ([`model`], [`train`]) and the analysis tools used to inspect learned
//! features ([`analysis`]).

pub mod analysis;
pub mod centers;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod par;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use centers::{
    distribute_centers, extract_centers, update_moving_centers, CenterScope, CenterValues,
    ClassCenters, LabelMask, IGNORE_LABEL,
};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use graph::{Graph, ReduceKind, Var};
pub use losses::{
    combine, cross_entropy_loss, inter_c2c_loss, inter_c2p_loss, intra_c2p_loss, CarThresholds,
    LossBundle, LossTerms, LossWeights, Replacement,
};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use model::{Model, ModelConfig};
pub use synth::{Sample, SceneSpec, Split};
pub use train::{evaluate_miou, poly_lr, train, CenterMode, TrainConfig, TrainLog};
