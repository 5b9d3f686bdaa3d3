//! Planning core for latency-constrained LLM inference serving.
//!
//! This crate models the cost of distributed transformer inference from
//! profile tables, represents execution schedules that decouple input
//! encoding from output decoding, and searches for the
//! throughput-maximizing schedule under a latency bound. Everything here
//! is pure computation over in-memory values: no IO, no clocks, no
//! threads. The companion `llmsched` crate adds file formats and a CLI.
//!
//! Modules:
//!
//! - [`seqdist`]: sequence-length distributions and per-phase completion
//!   probabilities.
//! - [`cost_model`]: profile tables, a synthetic roofline generator, and
//!   interpolated layer/stage timing.
//! - [`schedule`]: cluster/model/schedule types, layer-allocation
//!   policies, derived batch sizes, and memory feasibility.
//! - [`analytic`]: expected-value timeline construction (throughput and
//!   latency estimates for a schedule).
//! - [`event_sim`]: stochastic query-by-query simulation used as ground
//!   truth for the analytic estimates and for baseline policies.
//! - [`optimizer`]: monotonic branch-and-bound search over the schedule
//!   control variables, an exhaustive oracle, and a monotonicity audit.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analytic;
pub mod cost_model;
pub mod error;
pub mod event_sim;
pub mod optimizer;
pub mod schedule;
pub mod seqdist;

pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;
