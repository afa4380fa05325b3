// `!(a > b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod train;

pub use attention::{MeanMode, TemperaturePolicy};
pub use autodiff::{ClipGradient, Graph, Var};
pub use error::{FocalError, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Precision, Scalar, Tensor, TensorId};
