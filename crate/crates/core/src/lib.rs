//! Vessel segmentation with a deliberately small CNN.
//!
//! The pipeline classifies every pixel of an enhanced grayscale fundus image
//! by the 9×9 patch around it, then shrinks the trained network in two
//! passes: dense layers are quantized to ternary weights ({-1, 0, +1}) and
//! convolutional layers are magnitude-pruned against a per-layer threshold
//! derived from the weight spread, each pass followed by retraining.
//!
//! The crate is organized around that pipeline:
//!
//! - [`tensor`] / [`network`] — the numeric carrier and the layer engine
//!   (forward, backprop, SGD, gradient checking).
//! - [`preprocess`] — grayscale conversion, local histogram equalization,
//!   patch extraction, dataset sampling, fold splitting.
//! - [`compress`] — ternary quantization and variance-thresholded pruning
//!   with their retrain loops.
//! - [`eval`] — confusion metrics, ROC/AUC, whole-image segmentation and
//!   the cross-validation harness.
//! - [`modelio`] — the bit-exact `TQNS` model format, the complexity report
//!   and dataset loading.
//! - [`synthetic`] — a self-contained line-detection task for desk-scale
//!   runs with no external data.

pub mod compress;
pub mod config;
pub mod eval;
mod guide;
pub mod modelio;
pub mod network;
pub mod pnm;
pub mod preprocess;
pub mod synthetic;
pub mod tensor;

pub use tensor::Tensor;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: u64 },
    #[error("({x}, {y}) is outside the {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("degenerate layer: {0}")]
    DegenerateLayer(String),
    #[error("pipeline order violated: {0}")]
    PipelineOrder(String),
    #[error("corrupt model file at byte {offset}: {reason}")]
    CorruptModel { offset: usize, reason: String },
    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),
    #[error("malformed netpbm data: {0}")]
    Pnm(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl Into<Vec<usize>>,
        actual: impl Into<Vec<usize>>,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
