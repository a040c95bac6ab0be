//! Losses, label mapping, ensembling, test-time augmentation merging and
//! mIoU evaluation for two-frame video semantic segmentation.
//!
//! The crate is framework-free: losses return analytic gradients, and every
//! file-facing type round-trips through bit-exact formats ([`tensor_io`]).

pub mod ensemble;
pub mod gradcheck;
pub mod label_map;
pub mod losses;
pub mod metrics;
pub mod tensor_io;
pub mod toytrain;
pub mod tta;

use thiserror::Error;

pub use ensemble::{EnsembleCoefficient, EnsembleError};
pub use label_map::{Decision, LabelMapError, MappingTable, MissingPolicy, Target};
pub use losses::{FeatureClip, LossError, LossWeights, NceConfig, ProbField};
pub use metrics::{ConfusionMatrix, MetricsError, MiouReport};
pub use tensor_io::{FormatError, ProbMap, SegMask, IGNORE};
pub use toytrain::{SynthClip, ToyModel, TrainError};
pub use tta::{TtaError, WindowPlan};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    LabelMap(#[from] LabelMapError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Tta(#[from] TtaError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
