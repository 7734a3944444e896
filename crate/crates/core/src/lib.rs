//! Temporal-query transformer for multi-agent accident detection.
//!
//! Multi-view frame features from each agent are distilled into a small set
//! of query tokens that are carried from frame to frame through temporal
//! attention. The final queries of the participating agents are stacked and
//! classified by an MLP head trained with focal loss. Everything runs on a
//! small reverse-mode autodiff engine in `f64` so each mechanism can be
//! checked against finite differences and brute-force oracles.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fleet;
pub mod gradcheck;
pub mod loss;
pub mod message;
pub mod nn;
pub mod optim;
pub mod params;
pub mod qformer;
pub mod rng;
pub mod scenario;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{OpKind, Tape, Var};
pub use error::{Error, ErrorCategory, Result};
pub use params::{Grads, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
