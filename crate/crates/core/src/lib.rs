//! Offline Q-learning for ads-slot allocation in a feed.
//!
//! The agent scores a page arrangement (which of the `K` slots show ads) from
//! a list-wise representation of the arranged items, and is trained from logs
//! with a DQN loss plus reconstruction, prediction and contrastive auxiliary
//! losses. A synthetic feed simulator produces the logs and serves as the
//! evaluation environment.

pub mod agent;
pub mod auxtasks;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod mdp;
pub mod plot;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
