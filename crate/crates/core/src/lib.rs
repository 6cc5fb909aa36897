//! Hierarchical multi-label code prediction.
//!
//! The crate is `no_std` (with `alloc`). It covers the code taxonomy, stack
//! tree positions, the label co-occurrence graph with personalized-PageRank
//! propagation, a small reverse-mode tensor engine, the convolutional
//! document encoder, the bidirectional hierarchy encoders, code-wise
//! attention with the progressive mechanism, metrics, a synthetic corpus
//! generator and the training loop. File formats and the command-line front
//! end live in the `hienet` crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autodiff;
pub mod doc_encoder;
pub mod error;
pub mod graph;
pub mod head;
pub mod hierarchy;
pub mod init;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod position;
pub mod progressive;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod tree;

pub use error::{Error, Result};
pub use tensor::Tensor;
