use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Perturbation `w >= 0` of the sampling schedule
/// `tau_{i+1} = tau_i + r exp(-w(tau_i))`.
#[derive(Clone)]
pub enum Perturbation {
    Zero,
    Constant(f64),
    /// `ln(2 / (1 + |sin t|))`, gaps in `[r/2, r]`.
    AbsSine,
    /// Indexed by sample count; the last entry repeats.
    Sequence(Vec<f64>),
    /// Independent uniform draws in `[0, max]` per sample from a seeded stream.
    Seeded { seed: u64, max: f64 },
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Function(_) => f.write_str("Function(..)"),
            other => write!(f, "{other}"),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("zero"),
            Self::Constant(v) => write!(f, "const:{v}"),
            Self::AbsSine => f.write_str("abs_sine"),
            Self::Sequence(v) => {
                f.write_str("seq:")?;
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
            Self::Seeded { seed, max } => write!(f, "seeded:{seed}:{max}"),
            Self::Function(_) => f.write_str("function"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    /// Accepts `zero`, `const:<v>`, `abs_sine`, `seq:<v>,<v>,..` and
    /// `seeded:<seed>:<max>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown perturbation spec '{s}'"));
        let s = s.trim();
        let p = match s {
            "zero" => Self::Zero,
            "abs_sine" => Self::AbsSine,
            _ => {
                let (head, rest) = s.split_once(':').ok_or_else(bad)?;
                match head {
                    "const" => Self::Constant(rest.trim().parse().map_err(|_| bad())?),
                    "seq" => Self::Sequence(
                        rest.split(',')
                            .map(|t| t.trim().parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad())?,
                    ),
                    "seeded" => {
                        let (seed, max) = rest.split_once(':').ok_or_else(bad)?;
                        Self::Seeded {
                            seed: seed.trim().parse().map_err(|_| bad())?,
                            max: max.trim().parse().map_err(|_| bad())?,
                        }
                    }
                    _ => return Err(bad()),
                }
            }
        };
        p.validate_static()?;
        Ok(p)
    }
}

impl Perturbation {
    /// Rejects specs that are negative regardless of the evaluation time.
    pub fn validate_static(&self) -> Result<()> {
        let check = |v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidPerturbation { time: 0.0, value: v })
            }
        };
        match self {
            Self::Constant(v) => check(*v),
            Self::Sequence(vs) => vs.iter().try_for_each(|v| check(*v)),
            Self::Seeded { max, .. } => check(*max),
            _ => Ok(()),
        }
    }
}

/// Sampling instants `tau_0 = 0 < tau_1 < ...`, generated until the first
/// instant at or beyond the horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub r: f64,
    pub tau: Vec<f64>,
}

/// Upper bound on generated instants, as a guard against vanishing gaps.
const MAX_INSTANTS: usize = 500_000_000;

pub fn make_schedule(r: f64, w: &Perturbation, horizon: f64) -> Result<Schedule> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!("sampling period must be positive, got {r}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    let mut rng = match w {
        Perturbation::Seeded { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let mut tau = vec![0.0];
    let mut t = 0.0;
    let mut i = 0usize;
    while t < horizon {
        let wv = match w {
            Perturbation::Zero => 0.0,
            Perturbation::Constant(v) => *v,
            Perturbation::AbsSine => (2.0 / (1.0 + t.sin().abs())).ln(),
            Perturbation::Sequence(v) => v.get(i).or(v.last()).copied().unwrap_or(0.0),
            Perturbation::Seeded { max, .. } => {
                let rng = rng.as_mut().expect("seeded stream");
                if *max > 0.0 {
                    rng.gen_range(0.0..=*max)
                } else {
                    0.0
                }
            }
            Perturbation::Function(f) => f(t),
        };
        if !(wv >= 0.0) || !wv.is_finite() {
            return Err(Error::InvalidPerturbation { time: t, value: wv });
        }
        let gap = r * (-wv).exp();
        let next = t + gap;
        if !(next > t) || tau.len() >= MAX_INSTANTS {
            return Err(Error::InvalidPerturbation { time: t, value: wv });
        }
        t = next;
        tau.push(t);
        i += 1;
    }
    Ok(Schedule { r, tau })
}

impl Schedule {
    pub fn gaps(&self) -> impl Iterator<Item = f64> + '_ {
        self.tau.windows(2).map(|w| w[1] - w[0])
    }

    pub fn min_gap(&self) -> f64 {
        self.gaps().fold(f64::INFINITY, f64::min)
    }

    pub fn horizon(&self) -> f64 {
        *self.tau.last().expect("non-empty schedule")
    }
}
