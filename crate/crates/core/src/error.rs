use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is numerically singular (pivot {pivot:e} below threshold {threshold:e})")]
    SingularMatrix { pivot: f64, threshold: f64 },
    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("closed-loop Lyapunov sum is not negative definite (largest eigenvalue {max_eigenvalue:e})")]
    NotNegativeDefinite { max_eigenvalue: f64 },
    #[error("dimension mismatch: expected {expected}, got {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: &'static str,
    },
    #[error("infeasible design: {0}")]
    InfeasibleDesign(String),
    #[error("small-gain condition violated: L1 = {l1} is not below {threshold}")]
    SmallGainViolated { l1: f64, threshold: f64 },
    #[error("sampling perturbation evaluated to {value} at t = {time} (must be non-negative)")]
    InvalidPerturbation { time: f64, value: f64 },
    #[error("state norm exceeded the overflow guard at t = {time}")]
    Divergence { time: f64 },
    #[error("no stabilizing sampling period found (smallest probe r = {probe} failed)")]
    NoStabilizingRate { probe: f64 },
    #[error("input history does not cover [{from}, {to}] (recorded [{start}, {end}])")]
    WindowNotCovered {
        from: f64,
        to: f64,
        start: f64,
        end: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
