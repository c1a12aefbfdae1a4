//! Spiking reservoirs meta-trained to learn from a stream of examples.
//!
//! An outer loop tunes the weights of a recurrent network of leaky
//! integrate-and-fire neurons with truncated backpropagation through time,
//! across many tasks drawn from a family. After training, the network
//! adapts to a new task of the family either through a local plasticity
//! rule on its readout or purely through its own dynamics.

pub mod baselines;
pub mod bptt;
pub mod checkpoint;
pub mod config;
pub mod encoding;
pub mod error;
pub mod inner_loop;
pub mod metrics;
pub mod outer_loop;
pub mod parallel;
pub mod record;
pub mod rng;
pub mod snn;
pub mod tasks;

pub use error::{Error, Result};
