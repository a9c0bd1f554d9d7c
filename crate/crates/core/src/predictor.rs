//! Exact state prediction for the three-state chain under input delay `tau`
//! and measurement delay `T`, and the predictor-based delayed closed loop.

use std::collections::VecDeque;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::simulator::{check_finite, substeps, Rk4, Trajectory};
use crate::system::chain3;

/// Largest sampling period accepted for the delayed loop.
pub const MAX_DELAYED_PERIOD: f64 = 0.2;

/// Piecewise-constant record of `u`: value `values[k]` on
/// `[starts[k], starts[k+1])`, the last value held up to `end`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputHistory {
    starts: Vec<f64>,
    values: Vec<f64>,
    end: f64,
}

impl InputHistory {
    pub fn new(start: f64, value: f64) -> Self {
        Self {
            starts: vec![start],
            values: vec![value],
            end: start,
        }
    }

    /// `u = value` on `[a, b)`.
    pub fn constant(a: f64, b: f64, value: f64) -> Self {
        let mut h = Self::new(a, value);
        h.extend_to(b);
        h
    }

    /// Builds from `(start, value)` pairs covering `[pairs[0].0, end)`.
    pub fn from_segments(pairs: &[(f64, f64)], end: f64) -> Result<Self> {
        let (first, rest) = pairs
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("empty input history".into()))?;
        let mut h = Self::new(first.0, first.1);
        for &(t, v) in rest {
            h.push(t, v)?;
        }
        if end < h.end {
            return Err(Error::InvalidArgument("history end precedes last breakpoint".into()));
        }
        h.extend_to(end);
        Ok(h)
    }

    pub fn start(&self) -> f64 {
        self.starts[0]
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        (0..self.starts.len()).map(move |k| {
            let b = self.starts.get(k + 1).copied().unwrap_or(self.end);
            (self.starts[k], b, self.values[k])
        })
    }

    /// Holds the last value up to `t`.
    pub fn extend_to(&mut self, t: f64) {
        if t > self.end {
            self.end = t;
        }
    }

    /// Starts a new segment at `t`; the previous value is held until `t`.
    pub fn push(&mut self, t: f64, value: f64) -> Result<()> {
        let last = *self.starts.last().expect("non-empty");
        if !(t > last) || t < self.end {
            return Err(Error::InvalidArgument(format!(
                "breakpoint {t} does not extend history ending at {}",
                self.end
            )));
        }
        self.starts.push(t);
        self.values.push(value);
        self.end = t;
        Ok(())
    }

    /// Value on the segment containing `t`.
    pub fn value_at(&self, t: f64) -> Result<f64> {
        let tol = 1e-12 * t.abs().max(1.0);
        if t < self.start() - tol || t > self.end + tol {
            return Err(Error::WindowNotCovered {
                from: t,
                to: t,
                start: self.start(),
                end: self.end,
            });
        }
        let k = self.starts.partition_point(|s| *s <= t).max(1) - 1;
        Ok(self.values[k])
    }

    /// Drops whole segments that end before `t`.
    pub fn prune_before(&mut self, t: f64) {
        let k = self.starts.partition_point(|s| *s <= t).saturating_sub(1);
        if k > 0 {
            self.starts.drain(..k);
            self.values.drain(..k);
        }
    }
}

/// Integrals of the input over a window `[a, b]`, with `U(s) = int_a^s u`:
/// `i1 = U(b)`, `i2 = int U`, `j = int (1+u) U`, `i3 = int_a^b int_a^s (1+u) U`,
/// `sq = int U^2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct HistoryIntegrals {
    pub i1: f64,
    pub i2: f64,
    pub j: f64,
    pub i3: f64,
    pub sq: f64,
}

/// Closed-form integrals segment by segment; no quadrature.
pub fn history_integrals(h: &InputHistory, a: f64, b: f64) -> Result<HistoryIntegrals> {
    // absorb rounding in window endpoints computed as differences of times
    let tol = 1e-12 * a.abs().max(b.abs()).max(1.0);
    if a < h.start() - tol || b > h.end() + tol || b < a {
        return Err(Error::WindowNotCovered {
            from: a,
            to: b,
            start: h.start(),
            end: h.end(),
        });
    }
    let mut acc = HistoryIntegrals::default();
    for (s0, s1, v) in h.segments() {
        let lo = s0.max(a);
        let hi = s1.min(b);
        if hi <= lo {
            continue;
        }
        let l = hi - lo;
        let (l2, l3) = (l * l, l * l * l);
        let (u0, j0) = (acc.i1, acc.j);
        let w = 1.0 + v;
        acc.i3 += j0 * l + w * (u0 * l2 / 2.0 + v * l3 / 6.0);
        acc.sq += u0 * u0 * l + u0 * v * l2 + v * v * l3 / 3.0;
        acc.i2 += u0 * l + v * l2 / 2.0;
        acc.j += w * (u0 * l + v * l2 / 2.0);
        acc.i1 += v * l;
    }
    Ok(acc)
}

/// Input delay `tau`, measurement delay `T` and period `r` with `tau = l r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DelaySpec {
    pub tau: f64,
    #[serde(rename = "T")]
    pub t_meas: f64,
    pub r: f64,
    pub l: usize,
}

impl DelaySpec {
    pub fn new(tau: f64, t_meas: f64, r: f64) -> Result<Self> {
        if !(tau > 0.0 && t_meas > 0.0 && r > 0.0) || !(tau + t_meas + r).is_finite() {
            return Err(Error::InvalidArgument(format!(
                "delays and period must be positive: tau={tau}, T={t_meas}, r={r}"
            )));
        }
        if r > MAX_DELAYED_PERIOD * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "period {r} exceeds {MAX_DELAYED_PERIOD}"
            )));
        }
        let l = (tau / r).round();
        if l < 1.0 || (l * r - tau).abs() > 1e-9 * tau {
            return Err(Error::InvalidArgument(format!(
                "input delay {tau} is not an integer multiple of period {r}"
            )));
        }
        Ok(Self {
            tau,
            t_meas,
            r,
            l: l as usize,
        })
    }

    /// `l = ceil(5 tau)`, `r = tau / l`.
    pub fn from_rule(tau: f64, t_meas: f64) -> Result<Self> {
        let l = (5.0 * tau).ceil().max(1.0);
        Self::new(tau, t_meas, tau / l)
    }

    /// Prediction horizon `tau + T`.
    pub fn lead(&self) -> f64 {
        self.tau + self.t_meas
    }
}

/// Predicted `x(tau_i + tau)` from the measurement `x(tau_i - T)` and the
/// input record on `[tau_i - T - tau, tau_i]`.
pub fn predict_state(x_meas: &[f64], hist: &InputHistory, tau_i: f64, delays: &DelaySpec) -> Result<[f64; 3]> {
    if x_meas.len() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            found: x_meas.len(),
            context: "predictor measurement",
        });
    }
    let h = delays.lead();
    let g = history_integrals(hist, tau_i - h, tau_i)?;
    let (x1, x2, x3) = (x_meas[0], x_meas[1], x_meas[2]);
    Ok([
        x1 + g.i1,
        x2 + h * x1 + x1 * g.i1 + g.j,
        x3 + h * (x2 + x1 * x1) + 0.5 * h * h * x1 + 3.0 * x1 * g.i2 + g.i3 + g.sq,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub tau_i: f64,
    pub predicted: [f64; 3],
    pub actual: [f64; 3],
}

impl PredictionRecord {
    pub fn error(&self) -> f64 {
        let d: Vec<f64> = self.predicted.iter().zip(&self.actual).map(|(p, a)| p - a).collect();
        norm(&d)
    }
}

/// `W(t) = max_{[t-T, t]} |x| + sup_{[t-T-tau, t)} |u|` at the start and end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UgasStat {
    pub initial: f64,
    pub final_value: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayedRun {
    pub delays: DelaySpec,
    pub trajectory: Trajectory,
    pub predictions: Vec<PredictionRecord>,
    /// `(tau_i, u_i)` computed at each sampling instant.
    pub controls: Vec<(f64, f64)>,
    pub ugas: UgasStat,
}

impl DelayedRun {
    /// Writes `tau_i,X1,X2,X3,x1_true,x2_true,x3_true` rows, where the true
    /// state is taken at `tau_i + tau`.
    pub fn write_prediction_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        wr.write_record(["tau_i", "X1", "X2", "X3", "x1_true", "x2_true", "x3_true"])
            .map_err(io)?;
        for p in &self.predictions {
            let mut row = vec![p.tau_i.to_string()];
            row.extend(p.predicted.iter().chain(&p.actual).map(f64::to_string));
            wr.write_record(&row).map_err(io)?;
        }
        wr.flush().map_err(|e| Error::InvalidArgument(format!("csv write failed: {e}")))?;
        Ok(())
    }
}

/// Event times in `[0, horizon]`: samples `i r`, measurement instants
/// `i r - T`, and the delayed breakpoints of the initial input record.
fn event_grid(delays: &DelaySpec, u0: &InputHistory, n_samples: usize) -> Vec<f64> {
    let horizon = n_samples as f64 * delays.r;
    let mut ev: Vec<f64> = (0..=n_samples).map(|i| i as f64 * delays.r).collect();
    ev.extend(
        (0..=n_samples)
            .map(|i| i as f64 * delays.r - delays.t_meas)
            .filter(|t| *t > 0.0),
    );
    ev.extend(
        u0.segments()
            .map(|(s, _, _)| s + delays.tau)
            .filter(|t| *t > 0.0 && *t < horizon),
    );
    ev.sort_by(f64::total_cmp);
    let tol = 1e-12 * horizon.max(1.0);
    let mut out: Vec<f64> = Vec::with_capacity(ev.len());
    for t in ev {
        match out.last_mut() {
            Some(last) if t - *last <= tol => {
                // prefer the exactly computed sample instant
                if (t / delays.r).fract() == 0.0 {
                    *last = t;
                }
            }
            _ => out.push(t),
        }
    }
    out
}

/// Delayed closed loop `x1' = u(t - tau)` of the three-state chain with
/// `u(tau_i) = k(X(tau_i))` on the periodic schedule `tau_i = i r`.
/// `x0_history` gives the state on `[-T, 0]`, `u0` the input on
/// `[-T - tau, 0)`.
pub fn simulate_delayed_loop<K, H>(
    ctrl: K,
    delays: DelaySpec,
    x0_history: H,
    u0: &InputHistory,
    horizon: f64,
    step: f64,
) -> Result<DelayedRun>
where
    K: Fn(&[f64]) -> f64,
    H: Fn(f64) -> Vec<f64>,
{
    if !(horizon > 0.0 && step > 0.0) {
        return Err(Error::InvalidArgument("horizon and step must be positive".into()));
    }
    let (tau, tm, r) = (delays.tau, delays.t_meas, delays.r);
    if u0.start() > -tm - tau + 1e-12 * (tm + tau).max(1.0) || u0.end() < 0.0 {
        return Err(Error::WindowNotCovered {
            from: -tm - tau,
            to: 0.0,
            start: u0.start(),
            end: u0.end(),
        });
    }
    let x0 = x0_history(0.0);
    if x0.len() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            found: x0.len(),
            context: "initial state history",
        });
    }
    let sys = chain3();
    let n_samples = (horizon / r).ceil() as usize;
    let events = event_grid(&delays, u0, n_samples);

    let mut hist = u0.clone();
    hist.extend_to(0.0);
    let mut x = x0;
    let mut rk = Rk4::new(3);
    let mut traj = Trajectory {
        times: vec![],
        states: vec![],
        inputs: vec![],
        sampled: vec![],
        disturbance: vec![],
    };
    let mut measurements: VecDeque<(f64, Vec<f64>)> = VecDeque::new();
    let mut pending: VecDeque<(f64, [f64; 3], usize)> = VecDeque::new();
    let mut predictions = Vec::new();
    let mut controls = Vec::new();
    let mut next_sample = 0usize;

    for (e, &t0) in events.iter().enumerate() {
        let is_sample = next_sample <= n_samples && (t0 - next_sample as f64 * r).abs() <= 1e-12 * t0.max(1.0);
        // measurement instant for the sample T later
        measurements.push_back((t0, x.clone()));
        if is_sample {
            let i = next_sample;
            next_sample += 1;
            while let Some(&(_, _, k)) = pending.front() {
                if k != i {
                    break;
                }
                let (tau_i, predicted, _) = pending.pop_front().expect("front");
                predictions.push(PredictionRecord {
                    tau_i,
                    predicted,
                    actual: [x[0], x[1], x[2]],
                });
            }
            let t_meas = t0 - tm;
            let x_meas = if t_meas < 0.0 {
                x0_history(t_meas)
            } else {
                let pos = measurements
                    .iter()
                    .position(|(s, _)| (s - t_meas).abs() <= 1e-9 * r)
                    .ok_or(Error::WindowNotCovered {
                        from: t_meas,
                        to: t_meas,
                        start: measurements.front().map_or(t0, |m| m.0),
                        end: t0,
                    })?;
                measurements.drain(..pos);
                measurements[0].1.clone()
            };
            hist.extend_to(t0);
            let predicted = predict_state(&x_meas, &hist, t0, &delays)?;
            let u = ctrl(&predicted);
            if !u.is_finite() {
                return Err(Error::Divergence { time: t0 });
            }
            controls.push((t0, u));
            hist.push(t0, u)?;
            hist.prune_before(t0 - tm - tau - r);
            pending.push_back((t0, predicted, i + delays.l));
        }
        let Some(&t1) = events.get(e + 1) else {
            let u_applied = hist.value_at((t0 - tau).max(hist.start()))?;
            traj.times.push(t0);
            traj.states.push(x.clone());
            traj.inputs.push(u_applied);
            traj.sampled.push(is_sample);
            traj.disturbance.push(vec![]);
            break;
        };
        let mid = 0.5 * (t0 + t1) - tau;
        let u_applied = hist.value_at(mid)?;
        let m = substeps(t1 - t0, step);
        let h = (t1 - t0) / m as f64;
        for j in 0..m {
            let t = if j == 0 { t0 } else { t0 + j as f64 * h };
            traj.times.push(t);
            traj.states.push(x.clone());
            traj.inputs.push(u_applied);
            traj.sampled.push(j == 0 && is_sample);
            traj.disturbance.push(vec![]);
            rk.step(&sys, &[], &mut x, u_applied, h);
            check_finite(&x, t + h)?;
        }
    }

    let ugas = ugas_stat(&traj, &controls, &delays, &x0_history, u0);
    Ok(DelayedRun {
        delays,
        trajectory: traj,
        predictions,
        controls,
        ugas,
    })
}

fn ugas_stat<H: Fn(f64) -> Vec<f64>>(
    traj: &Trajectory,
    controls: &[(f64, f64)],
    delays: &DelaySpec,
    x0_history: &H,
    u0: &InputHistory,
) -> UgasStat {
    let (tau, tm) = (delays.tau, delays.t_meas);
    let initial_x = (0..=64)
        .map(|k| norm(&x0_history(-tm + tm * k as f64 / 64.0)))
        .fold(0.0, f64::max);
    let initial_u = u0
        .segments()
        .filter(|(a, b, _)| *b > -tm - tau && *a < 0.0)
        .map(|(_, _, v)| v.abs())
        .fold(0.0, f64::max);
    let t_end = *traj.times.last().unwrap_or(&0.0);
    let final_x = traj
        .times
        .iter()
        .zip(&traj.states)
        .filter(|(t, _)| **t >= t_end - tm)
        .map(|(_, x)| norm(x))
        .fold(0.0, f64::max);
    // u_i holds on [tau_i, tau_{i+1}); include the sample active at the window start
    let lo = t_end - tm - tau;
    let first = controls.partition_point(|(t, _)| *t <= lo).saturating_sub(1);
    let final_u = controls[first..]
        .iter()
        .filter(|(t, _)| *t < t_end)
        .map(|(_, u)| u.abs())
        .fold(0.0, f64::max);
    let initial = initial_x + initial_u;
    let final_value = final_x + final_u;
    UgasStat {
        initial,
        final_value,
        ratio: if initial > 0.0 { final_value / initial } else { 0.0 },
    }
}
