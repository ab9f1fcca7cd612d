//! Class-wise adversarial robustness laboratory.

// `!(x > 0.0)` is used on purpose to reject NaN; index loops mirror the maths.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod analysis;
pub mod attacks;
pub mod autodiff;
pub mod background_study;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod models;
pub mod runner;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
