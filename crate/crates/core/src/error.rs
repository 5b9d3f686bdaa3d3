//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors produced by the planning core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A constructor received an argument outside its domain.
    InvalidParameter(String),
    /// A profile-table query fell outside the profiled grid hull.
    /// No extrapolation is performed.
    OutOfRange {
        axis: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    /// The requested tensor-parallel degree has no entries in the table.
    UnknownTpDegree(u32),
    /// A loaded or constructed table violates its invariants.
    InvalidTable(String),
    /// No schedule of the requested shape fits the cluster.
    Infeasible(String),
    /// A schedule violates the per-GPU memory budget. Carries the
    /// per-GPU accounting that failed.
    MemoryExceeded(crate::schedule::MemoryReport),
    /// The search space is empty or every point violates the latency
    /// bound. Carries the lower-corner performance when known.
    InfeasibleUnderBound(Option<crate::optimizer::Perf>),
    /// An exhaustive enumeration was refused because the grid is too
    /// large. Carries the estimated point count.
    GridTooLarge(u64),
    /// The event simulation reached a state with unfinished queries but
    /// nothing runnable.
    Deadlock(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::OutOfRange {
                axis,
                value,
                lo,
                hi,
            } => write!(
                f,
                "query {value} on axis `{axis}` outside profiled hull [{lo}, {hi}]"
            ),
            Error::UnknownTpDegree(d) => {
                write!(f, "tensor-parallel degree {d} not present in profile table")
            }
            Error::InvalidTable(msg) => write!(f, "invalid profile table: {msg}"),
            Error::Infeasible(msg) => write!(f, "infeasible: {msg}"),
            Error::MemoryExceeded(report) => {
                write!(f, "per-GPU memory budget exceeded: {report}")
            }
            Error::InfeasibleUnderBound(Some(p)) => write!(
                f,
                "no feasible point under latency bound (lower corner: latency {:.4}s, throughput {:.4}/s)",
                p.latency, p.thrput
            ),
            Error::InfeasibleUnderBound(None) => {
                write!(f, "no feasible point under latency bound")
            }
            Error::GridTooLarge(n) => {
                write!(f, "exhaustive search refused: grid has ~{n} points")
            }
            Error::Deadlock(msg) => write!(f, "simulation deadlock: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
