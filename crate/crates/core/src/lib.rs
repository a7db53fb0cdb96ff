//! Generalized matrix factor models for sequences of matrices with mixed
//! likelihood families.
pub(crate) mod blocks;
pub mod cli;
pub mod error;
pub mod evalsim;
pub mod families;
pub mod fit;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod mm;
pub mod model;
pub(crate) mod newton;
pub mod normalize;
pub mod rng;
pub mod selection;
pub mod special;
pub mod tsam;
pub use error::{GmfmError, Result};
pub use families::{CellDerivatives, FamilyKind};
pub use model::{Dataset, FactorParams, FamilyBlock, FamilyMap, MatrixSeries, PenaltyWeights};
