//! Uncertainty-aware fault classifiers trained on data from several
//! instances of a synthetic digital twin.

// Checks written as `!(x > 0.0)` also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod model;
pub mod normal;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod twin;
pub mod uncertainty;

pub use error::{Error, Result};
pub use layers::{GaussianActivation, Layer, LayerSpec, Mode, Sequential};
pub use model::{ArchConfig, Architecture, ModelKind, Network};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
