//! Conditional normalizing-flow black-box attacks: data, target models,
//! white-box collectors, the flow, its trainer and the hard-label attack.

pub mod attack;
pub mod data;
pub mod flow;
mod error;
pub mod models;
pub mod optim;
pub mod train;
pub mod whitebox;

pub use error::{Error, Result};
