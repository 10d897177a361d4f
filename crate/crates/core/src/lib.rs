// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradsuite;
pub mod hfa;
pub mod losses;
pub mod model;
pub mod params;
pub mod sampling;
pub mod sft;
pub mod tensor;
pub mod train;
pub mod vlc;

pub use config::{Config, Variant};
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::{Graph, Tensor, Var};
