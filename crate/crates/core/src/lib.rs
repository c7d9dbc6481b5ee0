//! Stereo matching with displacement-invariant cost computation: one shared
//! 2D matching network evaluated on every disparity-shifted feature pair.

pub mod autodiff;
pub mod baseline;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod maps;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod training;

pub use autodiff::{Eager, Graph, RunningStats, Tape, Var};
pub use error::{Error, Result};
pub use maps::{DisparityMap, EntropyMap};
pub use tensor::{Scalar, ScalarMode, Shape, Tensor};
