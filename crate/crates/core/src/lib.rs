//! Federated graph-neural-network social recommendation under poisoning.
//!
//! Honest clients train a shared attention-aggregation recommender from their
//! local social graph, add pseudo items and upload privatized gradients.
//! Malicious clients forge updates to degrade accuracy or to plant a
//! backdoor for one target user. The server aggregates with one of several
//! robust rules.

pub mod aggregation;
pub mod attack;
pub mod client;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod orchestrator;

pub use error::{Error, Result};
