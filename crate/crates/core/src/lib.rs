//! Request execution path reconstruction and path-based anomaly detection
//! from system-call traces.

pub mod agent;
pub mod detect;
pub mod eval;
pub mod event;
pub mod fsa;
pub mod rep;
pub mod sim;
pub mod train;
