//! Event-driven spiking decoders for five-finger force estimation from
//! motor-unit spike trains or spike-encoded intramuscular EMG.

pub mod baseline;
pub mod config;
pub mod dataset;
pub mod decoders;
pub mod dynamics;
pub mod encoding;
pub mod eval;
pub mod error;
pub mod linalg;
pub mod report;
pub mod rng;
pub mod runner;
pub mod signals;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
