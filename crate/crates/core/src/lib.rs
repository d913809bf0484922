//! Selective state-space models with bilinear input modulation.
//!
//! The crate is layered bottom-up: [`autodiff`] supplies tensors and a
//! gradient tape, [`scan`] evaluates linear recurrences, [`ssm`] and
//! [`variants`] define the five recurrences, [`block`] wraps them into a
//! sequence model, and [`tasks`], [`train`] and [`eval`] run experiments.

pub mod autodiff;
pub mod block;
pub mod error;
pub mod eval;
pub mod scan;
pub mod ssm;
pub mod tasks;
pub mod train;
pub mod variants;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use ssm::{Architecture, ForwardOptions, ModelDims, ModelParams, ScanMode};
pub use variants::{Routing, VariantKind};
