//! Networks of echo state networks for NARMA-10: hand-engineered task
//! decomposition, end-to-end training through time, and transfer of
//! intermediate targets between networks.

pub mod analysis;
pub mod bptt;
pub mod config;
pub mod error;
pub mod esn;
pub mod experiment;
pub mod linalg;
pub mod network;
pub mod readout;
pub mod regime;
pub mod search;
pub mod seeds;
pub mod tasks;

pub use error::{Error, Result};
