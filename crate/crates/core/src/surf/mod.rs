//! Spatial imputation of missing building attributes.
//!
//! A missing value at a building is predicted from the known values of its
//! nearest neighbors, either by ordinary kriging on a fitted variogram or by
//! a neural network over an encoding of the neighborhood. Both engines sit
//! behind [`impute`]; [`cross_validate`] compares them on held-out data.

use thiserror::Error;

use crate::bim::{AttributeKind, BimError};

pub mod cv;
pub mod features;
pub mod geo;
pub mod impute;
pub mod kriging;
pub mod linalg;
pub mod mlp;
pub mod neighbors;
pub mod variogram;

pub use cv::{cross_validate, CvMetrics, CvReport};
pub use features::build_neighbor_features;
pub use geo::haversine_distance;
pub use impute::{impute, Engine, ImputeConfig, Imputation, MlpSettings};
pub use kriging::{krige, KrigingPrediction};
pub use mlp::{mlp_predict, mlp_train, Activation, Dataset, MlpModel, OutputKind, Targets, TrainConfig, TrainedModel};
pub use neighbors::{nearest_neighbors, Neighbor, NeighborContext, NeighborIndex, SpatialSample};
pub use variogram::{
    empirical_variogram, fit_variogram, variogram_value, EmpiricalVariogram, VariogramFamily, VariogramFit,
    VariogramModel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfError {
    #[error("{0} must be finite")]
    NonFinite(&'static str),
    #[error("no samples available")]
    NoSamples,
    #[error("neighbors must be sorted by ascending distance")]
    Unsorted,
    #[error("{0}")]
    InvalidParameter(String),
    #[error("no pairs within max_lag ({0} m)")]
    NoPairsWithinMaxLag(f64),
    #[error("variogram fitting needs at least 3 populated bins, got {0}")]
    TooFewBins(usize),
    #[error("lag must be non-negative, got {0}")]
    NegativeLag(f64),
    #[error("invalid variogram model {0:?}")]
    InvalidModel(VariogramModel),
    #[error("kriging system is singular")]
    SingularSystem,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch} (non-finite loss); try a smaller learning rate")]
    Diverged { epoch: usize },
    #[error("insufficient data for `{attribute}`: {known} known geocoded values, need {required}")]
    InsufficientData {
        attribute: String,
        known: usize,
        required: usize,
    },
    #[error("engine {engine} cannot impute {kind} attribute `{attribute}`")]
    EngineMismatch {
        engine: Engine,
        kind: AttributeKind,
        attribute: String,
    },
    #[error("fold {fold} has no test records")]
    EmptyFold { fold: usize },
    #[error(transparent)]
    Bim(#[from] BimError),
}
