//! Relation-aware graph attention for visual question answering.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: the tensor/autodiff substrate, box geometry, relation-graph
//! construction, the question and relation encoders, fusion and answer
//! prediction, the Adamax optimizer with its learning-rate schedule, and the
//! in-memory training loop. File formats and the command-line tool live in the
//! `regat` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod config;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod question;
pub mod relation;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, NodeId, OpKind};
pub use error::{Error, Result};
pub use gradcheck::{gradcheck, GradCheckReport};
pub use params::ParamStore;
pub use tensor::Tensor;
