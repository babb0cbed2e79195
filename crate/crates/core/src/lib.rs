//! Non-local RoI attention: a block that lets every region of interest
//! attend to every other region in the same image, plus gradients, a
//! synthetic training task, binary persistence and a scaling benchmark.

pub mod autodiff;
pub mod bench;
pub mod block;
pub mod config;
pub mod error;
pub mod io;
pub mod selftest;
pub mod tensor;
pub mod toy;

pub use block::{init_params, nlroi_forward, BlockDims, NlRoiOutput, NlRoiParams};
pub use error::{ConfigError, Error, FormatError, Result};
pub use tensor::{DType, Real, Tensor};
