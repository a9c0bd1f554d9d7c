//! Sampled-data closed-loop simulation under zero-order hold.

mod integrate;
mod masp;
mod metrics;
mod schedule;

pub use integrate::{
    exact_step_chain3, simulate_closed_loop, simulate_streaming, substeps, DisturbanceSpec, Point,
    Trajectory, DIVERGENCE_LIMIT,
};
pub(crate) use integrate::{check_finite, Rk4};
pub use masp::{masp_search, probe, MaspOptions, MaspResult, Probe, ProbeBank};
pub use metrics::{
    fit_decay_rate, gronwall_check, stability_metrics, time_to_ball, BallTime, GronwallReport,
    StabilityReport, BALL_SLACK, EPS_GRID,
};
pub use schedule::{make_schedule, Perturbation, Schedule};
