#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail range checks

pub mod conditioning;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod prompts;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Graph, Tensor, Var};
