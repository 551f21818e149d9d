//! Structured partial backpropagation (SPB) and an SPB-aware,
//! iteration-level GPU cluster scheduler, together with a trace-driven
//! discrete-event simulator, gang-scheduling baselines and brute-force
//! oracles used to check both halves.
//!
//! The `parallel` feature (on by default) runs Monte-Carlo trials and
//! independent simulations on the rayon pool; disabling it gives a fully
//! sequential build with identical results.

pub mod cost_model;
pub mod error;
pub mod io;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod scheduler;
pub mod sim;
pub mod spb;
pub mod trace;

pub use error::{Error, Result};

/// Simulated time, in integer microseconds.
pub type Micros = u64;

pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1000.0).round() as Micros
}
