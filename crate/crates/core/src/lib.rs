//! Instance coloring: a loss that turns a dense per-pixel color prediction
//! into an instance segmentation, point-prompted mask extraction from such a
//! color field, and the evaluation protocols used to score both.

pub mod error;
pub mod eval;
pub mod field;
pub mod io;
pub mod loss;
pub mod mask;
pub mod net;
pub mod optim;
pub mod prompt;
pub mod scene;

pub use error::{Error, Result};
pub use field::{ColorField, InstanceStats, LabelMap, Rgb};
pub use loss::{GradField, LossReport, LossWeights};
pub use mask::{BinaryMask, Rle};
