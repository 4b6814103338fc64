//! Cross-node federated graph neural network training, simulated on one
//! machine.
//!
//! Each sensor node owns a GRU encoder-decoder and its raw readings. A
//! server owns a graph network that turns every node's temporal encoding
//! into a graph-aware embedding. Training alternates between federated
//! averaging of the node models and split training of the server model,
//! and every simulated message is recorded in a byte-exact ledger.

pub mod comms;
pub mod error;
pub mod federation;
pub mod graphs;
pub mod harness;
pub mod numerics;
pub mod pipeline;
pub mod spatial;
pub mod temporal;

pub use error::{Error, Result};
