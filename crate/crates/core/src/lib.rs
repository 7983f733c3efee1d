// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod anab;
pub mod anchors;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod kitti;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ops;
pub mod parallel;
pub mod postproc;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use nn::ConvSpec;
pub use parallel::Exec;
pub use tensor::{Shape, Tensor};
