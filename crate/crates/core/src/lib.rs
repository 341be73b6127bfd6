//! Anchored dense-event set prediction over temporal feature sequences.
//!
//! The crate is `no_std` (it needs `alloc`). It carries the whole numeric
//! path: a small reverse-mode autodiff over dense `f64` tensors, the
//! multi-scale deformable encoder, position-anchored query generation,
//! the relation-biased decoder, prediction heads, Hungarian-matched
//! losses, synthetic data and the evaluation metrics. File formats, the
//! CLI and everything else that touches the OS live in the `evset` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod kmeans;
pub mod matching;
pub mod math;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pe;
pub mod query;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::TemporalInterval;
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
