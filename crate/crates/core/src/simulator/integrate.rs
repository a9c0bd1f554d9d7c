use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::system::SystemModel;

use super::schedule::Schedule;

/// States beyond this norm abort the run with [`Error::Divergence`].
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Disturbance signal `d(t)` in the model's disturbance box.
#[derive(Clone)]
pub enum DisturbanceSpec {
    Zero,
    Constant(Vec<f64>),
    /// Uniform draws over the box, held over each integration step.
    Uniform { seed: u64 },
    Function(Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>),
}

impl fmt::Debug for DisturbanceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("Zero"),
            Self::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Self::Uniform { seed } => f.debug_struct("Uniform").field("seed", seed).finish(),
            Self::Function(_) => f.write_str("Function(..)"),
        }
    }
}

pub(crate) struct DisturbanceSource<'a> {
    spec: &'a DisturbanceSpec,
    sys: &'a SystemModel,
    rng: Option<ChaCha8Rng>,
}

impl<'a> DisturbanceSource<'a> {
    pub(crate) fn new(spec: &'a DisturbanceSpec, sys: &'a SystemModel) -> Result<Self> {
        let l = sys.disturbances().dim();
        if let DisturbanceSpec::Constant(v) = spec {
            if !sys.disturbances().contains(v) {
                return Err(Error::InvalidArgument(format!(
                    "constant disturbance {v:?} outside the box of {}",
                    sys.name()
                )));
            }
        }
        let rng = match spec {
            DisturbanceSpec::Uniform { seed } if l > 0 => Some(ChaCha8Rng::seed_from_u64(*seed)),
            _ => None,
        };
        Ok(Self { spec, sys, rng })
    }

    pub(crate) fn fill(&mut self, t: f64, out: &mut [f64]) {
        match self.spec {
            DisturbanceSpec::Zero => out.fill(0.0),
            DisturbanceSpec::Constant(v) => out.copy_from_slice(v),
            DisturbanceSpec::Uniform { .. } => {
                if let Some(rng) = self.rng.as_mut() {
                    self.sys.disturbances().sample(rng, out);
                }
            }
            DisturbanceSpec::Function(f) => {
                f(t, out);
                let b = self.sys.disturbances();
                for (k, v) in out.iter_mut().enumerate() {
                    *v = v.clamp(b.lo[k], b.hi[k]);
                }
            }
        }
    }
}

/// Scratch buffers for one classical RK4 step with frozen `d` and `u`.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    pub(crate) fn step(&mut self, sys: &SystemModel, d: &[f64], x: &mut [f64], u: f64, h: f64) {
        let n = x.len();
        sys.eval(d, x, u, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        sys.eval(d, &self.tmp, u, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        sys.eval(d, &self.tmp, u, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        sys.eval(d, &self.tmp, u, &mut self.k4);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

pub(crate) fn check_finite(x: &[f64], t: f64) -> Result<()> {
    let n2: f64 = x.iter().map(|v| v * v).sum();
    if !n2.is_finite() || n2 > DIVERGENCE_LIMIT * DIVERGENCE_LIMIT {
        return Err(Error::Divergence { time: t });
    }
    Ok(())
}

/// One grid point handed to a streaming observer. `u` is the input held on
/// the step that starts here and `d` the disturbance used on it.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub u: f64,
    pub sampled: bool,
    pub d: &'a [f64],
}

/// Number of RK4 steps used on an inter-sample gap.
pub fn substeps(gap: f64, step: f64) -> usize {
    ((gap / step).ceil() as usize).max(1)
}

/// Streams the zero-order-hold closed loop `x' = F(d, x, k(x(tau_i)))`
/// over the schedule, calling `observer` on every grid point. The observer
/// may stop the run early by returning `false`. Returns the last state.
pub fn simulate_streaming<K, O>(
    sys: &SystemModel,
    ctrl: K,
    x0: &[f64],
    schedule: &Schedule,
    dist: &DisturbanceSpec,
    step: f64,
    mut observer: O,
) -> Result<Vec<f64>>
where
    K: Fn(&[f64]) -> f64,
    O: FnMut(Point<'_>) -> bool,
{
    let n = sys.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: x0.len(),
            context: "initial state",
        });
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("integration step must be positive, got {step}")));
    }
    let mut src = DisturbanceSource::new(dist, sys)?;
    let mut d = vec![0.0; sys.disturbances().dim()];
    let mut x = x0.to_vec();
    let mut rk = Rk4::new(n);
    check_finite(&x, 0.0)?;
    let tau = &schedule.tau;
    for w in tau.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let u = ctrl(&x);
        if !u.is_finite() {
            return Err(Error::Divergence { time: t0 });
        }
        let m = substeps(t1 - t0, step);
        let h = (t1 - t0) / m as f64;
        for j in 0..m {
            let t = if j == 0 { t0 } else { t0 + j as f64 * h };
            src.fill(t, &mut d);
            let keep = observer(Point {
                t,
                x: &x,
                u,
                sampled: j == 0,
                d: &d,
            });
            if !keep {
                return Ok(x);
            }
            rk.step(sys, &d, &mut x, u, h);
            check_finite(&x, t + h)?;
        }
    }
    let t_end = schedule.horizon();
    let u = ctrl(&x);
    observer(Point {
        t: t_end,
        x: &x,
        u,
        sampled: true,
        d: &d,
    });
    Ok(x)
}

/// Dense closed-loop record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<f64>,
    pub sampled: Vec<bool>,
    pub disturbance: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().map_or(&[], Vec::as_slice)
    }

    /// Indices of the sampling instants.
    pub fn sample_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.sampled.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i)
    }

    /// Writes `t,x1..xn,u,sampled,d1..dl` rows. Floats use the shortest
    /// representation that reads back to the same value.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let n = self.state_dim();
        let l = self.disturbance.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|k| format!("x{k}")));
        header.push("u".into());
        header.push("sampled".into());
        header.extend((1..=l).map(|k| format!("d{k}")));
        wr.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut row = Vec::with_capacity(header.len());
            row.push(self.times[i].to_string());
            row.extend(self.states[i].iter().map(f64::to_string));
            row.push(self.inputs[i].to_string());
            row.push(u8::from(self.sampled[i]).to_string());
            row.extend(self.disturbance[i].iter().map(f64::to_string));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| Error::InvalidArgument(format!("csv write failed: {e}")))?;
        Ok(())
    }

    /// Parses the format produced by [`Trajectory::write_csv`].
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        let n = header.iter().filter(|h| h.starts_with('x')).count();
        let l = header.iter().filter(|h| h.starts_with('d')).count();
        if header.len() != n + l + 3 {
            return Err(Error::InvalidArgument("unexpected trajectory header".into()));
        }
        let mut tr = Trajectory {
            times: vec![],
            states: vec![],
            inputs: vec![],
            sampled: vec![],
            disturbance: vec![],
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number '{s}' in trajectory")))
        };
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let f: Vec<&str> = rec.iter().collect();
            tr.times.push(num(f[0])?);
            tr.states.push(f[1..=n].iter().map(|s| num(s)).collect::<Result<_>>()?);
            tr.inputs.push(num(f[n + 1])?);
            tr.sampled.push(f[n + 2] == "1");
            tr.disturbance
                .push(f[n + 3..].iter().map(|s| num(s)).collect::<Result<_>>()?);
        }
        Ok(tr)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Records every grid point of [`simulate_streaming`].
pub fn simulate_closed_loop<K>(
    sys: &SystemModel,
    ctrl: K,
    x0: &[f64],
    schedule: &Schedule,
    dist: &DisturbanceSpec,
    step: f64,
) -> Result<Trajectory>
where
    K: Fn(&[f64]) -> f64,
{
    let mut tr = Trajectory {
        times: vec![],
        states: vec![],
        inputs: vec![],
        sampled: vec![],
        disturbance: vec![],
    };
    simulate_streaming(sys, ctrl, x0, schedule, dist, step, |p| {
        tr.times.push(p.t);
        tr.states.push(p.x.to_vec());
        tr.inputs.push(p.u);
        tr.sampled.push(p.sampled);
        tr.disturbance.push(p.d.to_vec());
        true
    })?;
    Ok(tr)
}

/// Exact flow of `x1' = u, x2' = x1 + x1 u, x3' = x2 + x1^2` over time `r`
/// with constant `u`.
pub fn exact_step_chain3(x: &[f64], u: f64, r: f64) -> [f64; 3] {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    let r2 = r * r;
    let r3 = r2 * r;
    [
        x1 + r * u,
        x2 + (1.0 + u) * (r * x1 + 0.5 * r2 * u),
        x3 + r * x2
            + 0.5 * r2 * (1.0 + u) * x1
            + r3 * (1.0 + u) * u / 6.0
            + r * x1 * x1
            + r2 * x1 * u
            + r3 * u * u / 3.0,
    ]
}
