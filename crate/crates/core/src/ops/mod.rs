//! Tape-free kernels shared by the graph ops.

pub mod conv;
pub mod matrix;
pub mod pool;
pub mod sample;

pub use conv::{align_conv_forward, conv2d_forward};
pub use sample::{bilinear_sample, bilinear_sample_with_grad};
