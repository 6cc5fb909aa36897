//! File formats, checkpoints, run manifests, a parallel batch map and the
//! `hienet` command line on top of [`hienet_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod par;

pub use error::{Error, Result};
pub use hienet_core as core;
