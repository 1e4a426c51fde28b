//! Wideband multi-stage LNA sizing engine.
//!
//! The crate turns a performance specification into component values for a
//! three-stage amplifier (cascode front end, two differential common-source
//! stages, magnetically coupled resonator couplers) by running a staged
//! resource-allocation tool pipeline under an agent orchestration loop. An
//! internal analytic evaluator provides full-chain small-signal, noise and
//! compression results so every run is reproducible without external
//! simulators.

pub mod agents;
pub mod bench;
pub mod config;
pub mod device;
pub mod error;
pub mod evaluator;
pub mod mcr;
pub mod memory;
pub mod optim;
pub mod plot;
pub mod spec;
pub mod tools;
pub mod twoport;

pub use error::{Error, Result};
