//! Measure how much private information leaks from the hidden
//! representations of neural text classifiers, and train classifiers that
//! leak less.
//!
//! The protocol has three phases:
//! 1. train a main classifier (an LSTM encoder plus feedforward head),
//!    optionally under one of three privacy defenses;
//! 2. export the frozen representations r(x) paired with the private
//!    attributes z;
//! 3. train an eavesdropping attacker on those pairs and report the
//!    utility/privacy tradeoff.
//!
//! See the `examples/` directory for runnable entry points into each
//! capability, or the `repleak` binary for the batch pipeline.

pub mod attack;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod optim;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
