//! Plant models `x' = F(d, x, u)` with a compact disturbance box.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::NonlinearityBound;
use crate::error::{Error, Result};

/// Right-hand side evaluator: `(d, x, u, out)` writes `F(d, x, u)` into `out`.
pub type Rhs = dyn Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync;

/// Axis-aligned disturbance box `D = [lo_1, hi_1] x ... x [lo_l, hi_l]`.
/// A zero-dimensional box stands for a disturbance-free model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DisturbanceBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DisturbanceBox {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn symmetric(dim: usize, bound: f64) -> Self {
        Self {
            lo: vec![-bound; dim],
            hi: vec![bound; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, d: &[f64]) -> bool {
        d.len() == self.dim()
            && d
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// Tensor grid with `per_dim` points per coordinate (a single point when
    /// the box is empty). Degenerate coordinates contribute one point.
    pub fn grid(&self, per_dim: usize) -> Vec<Vec<f64>> {
        let mut pts = vec![Vec::with_capacity(self.dim())];
        for (lo, hi) in self.lo.iter().zip(&self.hi) {
            let axis = linspace(*lo, *hi, if lo == hi { 1 } else { per_dim.max(1) });
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        pts
    }

    /// Maps a point of the unit cube onto the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(u)
            .map(|((lo, hi), t)| lo + (hi - lo) * t)
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        for ((o, lo), hi) in out.iter_mut().zip(&self.lo).zip(&self.hi) {
            *o = if lo == hi { *lo } else { rng.gen_range(*lo..=*hi) };
        }
    }
}

pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Continuous-time plant with scalar input.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    n: usize,
    rhs: Arc<Rhs>,
    disturbances: DisturbanceBox,
    envelope: Option<NonlinearityBound>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("disturbances", &self.disturbances)
            .finish_non_exhaustive()
    }
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        disturbances: DisturbanceBox,
        rhs: Arc<Rhs>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        if disturbances.lo.len() != disturbances.hi.len()
            || disturbances.lo.iter().zip(&disturbances.hi).any(|(l, h)| !(l <= h))
        {
            return Err(Error::InvalidArgument("malformed disturbance box".into()));
        }
        Ok(Self {
            name: name.into(),
            n,
            rhs,
            disturbances,
            envelope: None,
        })
    }

    pub fn with_envelope(mut self, envelope: NonlinearityBound) -> Self {
        self.envelope = Some(envelope);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn disturbances(&self) -> &DisturbanceBox {
        &self.disturbances
    }

    pub fn envelope(&self) -> Option<&NonlinearityBound> {
        self.envelope.as_ref()
    }

    #[inline]
    pub fn eval(&self, d: &[f64], x: &[f64], u: f64, out: &mut [f64]) {
        (self.rhs)(d, x, u, out)
    }

    pub fn eval_vec(&self, d: &[f64], x: &[f64], u: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.eval(d, x, u, &mut out);
        out
    }

    /// Spot-checks `F(d, 0, 0) = 0` on the disturbance grid and a
    /// finite-difference Lipschitz bound on the box `[-radius, radius]^n`.
    pub fn check_equilibrium_and_lipschitz(&self, radius: f64) -> Result<f64> {
        let zero = vec![0.0; self.n];
        for d in self.disturbances.grid(3) {
            let f0 = self.eval_vec(&d, &zero, 0.0);
            if f0.iter().any(|v| v.abs() > 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "{}: F(d, 0, 0) != 0 at d = {d:?}",
                    self.name
                )));
            }
        }
        let mut lip: f64 = 0.0;
        let h = 1e-6 * radius.max(1e-3);
        for d in self.disturbances.grid(2) {
            for corner in 0..(1usize << self.n) {
                let x: Vec<f64> = (0..self.n)
                    .map(|k| if corner >> k & 1 == 1 { radius } else { -radius } * 0.5)
                    .collect();
                let fx = self.eval_vec(&d, &x, 0.0);
                for k in 0..self.n {
                    let mut xp = x.clone();
                    xp[k] += h;
                    let fp = self.eval_vec(&d, &xp, 0.0);
                    let slope = fp
                        .iter()
                        .zip(&fx)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                        / h;
                    lip = lip.max(slope);
                }
            }
        }
        if !lip.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{}: right-hand side is not locally Lipschitz",
                self.name
            )));
        }
        Ok(lip)
    }
}

/// Three-state feedforward chain
/// `x1' = u, x2' = x1 + x1 u, x3' = x2 + x1^2`.
pub fn chain3() -> SystemModel {
    SystemModel::new(
        "chain3",
        3,
        DisturbanceBox::empty(),
        Arc::new(|_d, x, u, out| {
            out[0] = u;
            out[1] = x[0] + x[0] * u;
            out[2] = x[1] + x[0] * x[0];
        }),
    )
    .expect("valid builtin")
    .with_envelope(NonlinearityBound::constant(1.0))
}

/// Single integrator `x' = u`.
pub fn scalar_chain() -> SystemModel {
    SystemModel::new(
        "scalar_chain",
        1,
        DisturbanceBox::empty(),
        Arc::new(|_d, _x, u, out| out[0] = u),
    )
    .expect("valid builtin")
    .with_envelope(NonlinearityBound::zero())
}

/// Autonomous scalar decay `x' = -x` (input ignored).
pub fn linear_decay() -> SystemModel {
    SystemModel::new(
        "linear_decay",
        1,
        DisturbanceBox::empty(),
        Arc::new(|_d, x, _u, out| out[0] = -x[0]),
    )
    .expect("valid builtin")
}

/// Non-feedforward cascade with added integrator, state `(x1, x2, y)`,
/// `d in [-1, 1]^3`:
/// `x1' = k1 d1 x1 + u, x2' = k2 d2 x2 + x1, y' = x2 + d3 g(x)` with
/// `g(x) = g_gain sin(x1)`.
pub fn cascade2(k1: f64, k2: f64, g_gain: f64) -> SystemModel {
    SystemModel::new(
        "cascade2",
        3,
        DisturbanceBox::symmetric(3, 1.0),
        Arc::new(move |d, x, u, out| {
            out[0] = k1 * d[0] * x[0] + u;
            out[1] = k2 * d[1] * x[1] + x[0];
            out[2] = x[1] + d[2] * g_gain * x[0].sin();
        }),
    )
    .expect("valid builtin")
}

/// Linear-growth constant of the cascade nonlinearities on all of the state
/// space: `max{k1, k2, |grad g|}`.
pub fn cascade2_growth(k1: f64, k2: f64, g_gain: f64) -> f64 {
    k1.max(k2).max(g_gain.abs())
}
