//! Saturated forwarding feedback laws, evaluated at sampling instants only.

use serde::{Deserialize, Serialize};

use crate::design::{chain3_stage1_m, chain3_stage2_m, DesignStage, GainSchedule};
use crate::error::{Error, Result};
use crate::linalg::{sandwich_constants, Matrix, Vector};

/// `x / max(1, |x|)`
#[inline]
pub fn sat(x: f64) -> f64 {
    x / x.abs().max(1.0)
}

/// Single-stage law: `fallback(x)` when `x'Px >= R^2`, otherwise
/// `p'x - K c'b sat(omega (y + c'x))`.
pub fn forwarding_feedback(
    x: &[f64],
    y: f64,
    stage: &DesignStage,
    fallback: impl FnOnce(&[f64]) -> f64,
) -> f64 {
    let x = &x[..stage.dim()];
    if stage.energy(x) >= stage.r * stage.r {
        fallback(x)
    } else {
        inner_law(stage, x, y)
    }
}

#[inline]
fn inner_law(stage: &DesignStage, x: &[f64], y: f64) -> f64 {
    stage.p().dot(x) - stage.k * stage.cb() * sat(stage.omega * (y + stage.c().dot(x)))
}

/// Largest stage index `i` with `x'Q_i'P_iQ_ix < R_i^2`, scanning downward.
pub fn active_stage(x: &[f64], schedule: &GainSchedule) -> Option<usize> {
    schedule
        .stages()
        .iter()
        .rev()
        .find(|s| s.in_region(x))
        .map(DesignStage::index)
}

/// Recursive law over all stages; `-K0 sat(omega0 x1)` outside every region.
pub fn recursive_feedback(x: &[f64], schedule: &GainSchedule) -> f64 {
    debug_assert_eq!(x.len(), schedule.n());
    match active_stage(x, schedule) {
        Some(i) => {
            let st = &schedule.stages()[i - 1];
            inner_law(st, &x[..i], x[i])
        }
        None => -schedule.k0 * sat(schedule.omega0 * x[0]),
    }
}

/// Global bound `max{K0, max_i R_i(|p_i|/a_i + |c_i'b_i|)}` on the recursive
/// law, with `a_i = sqrt(lambda_min(P_i))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    pub bound: f64,
    pub within: bool,
}

pub fn bound_check(schedule: &GainSchedule, limit: f64) -> Result<BoundCheck> {
    let mut bound = schedule.k0;
    for st in schedule.stages() {
        let (_, a2) = sandwich_constants(st.p_matrix())?;
        // a_i = 1 / a2
        bound = bound.max(st.r * (st.p().norm() * a2 + st.cb().abs()));
    }
    Ok(BoundCheck {
        bound,
        within: bound <= limit,
    })
}

/// Serializable description of a feedback law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerSpec {
    /// `-K0 sat(omega0 x1)`
    Saturated { k0: f64, omega0: f64 },
    /// `p'x`
    Linear { gain: Vector },
    /// One forwarding stage over `(x, y)` with the given fallback on `x`.
    SingleStage {
        stage: DesignStage,
        fallback: Box<ControllerSpec>,
    },
    /// Nested stages `1..n-1` of a gain schedule.
    RecursiveForwarding { schedule: GainSchedule },
}

impl ControllerSpec {
    /// Dimension of the state the law expects, if fixed.
    pub fn state_dim(&self) -> Option<usize> {
        match self {
            Self::Saturated { .. } => None,
            Self::Linear { gain } => Some(gain.dim()),
            Self::SingleStage { stage, .. } => Some(stage.dim() + 1),
            Self::RecursiveForwarding { schedule } => Some(schedule.n()),
        }
    }

    pub fn check_dim(&self, n: usize) -> Result<()> {
        if let Self::SingleStage { stage, fallback } = self {
            if let Some(fd) = fallback.state_dim() {
                if fd != stage.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: stage.dim(),
                        found: fd,
                        context: "fallback law acts on the stage state",
                    });
                }
            }
        }
        match self.state_dim() {
            Some(d) if d != n => Err(Error::DimensionMismatch {
                expected: n,
                found: d,
                context: "controller vs system dimension",
            }),
            _ => Ok(()),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            Self::Saturated { k0, omega0 } => -k0 * sat(omega0 * x[0]),
            Self::Linear { gain } => gain.dot(x),
            Self::SingleStage { stage, fallback } => {
                forwarding_feedback(x, x[stage.dim()], stage, |xs| fallback.evaluate(xs))
            }
            Self::RecursiveForwarding { schedule } => recursive_feedback(x, schedule),
        }
    }

    /// Stage whose terminal set drives the local exponential phase, if any.
    pub fn terminal_stage(&self) -> Option<&DesignStage> {
        match self {
            Self::SingleStage { stage, .. } => Some(stage),
            Self::RecursiveForwarding { schedule } => schedule.stages().last(),
            _ => None,
        }
    }
}

fn chain3_schedule(r2: f64, k2: f64) -> GainSchedule {
    let (r1, k1) = (3.0 / 8.0, 0.25);
    let s1 = DesignStage::new(
        1,
        Matrix::identity(1),
        Vector::new(vec![-1.0]),
        k1,
        r1,
        1.0,
        chain3_stage1_m(r1, k1),
        1e-4,
    )
    .expect("valid stage");
    let s2 = DesignStage::new(
        2,
        Matrix::from_rows(&[[1.0, 1.0], [1.0, 2.0]]).expect("2x2"),
        Vector::new(vec![-2.0, -2.0]),
        k2,
        r2,
        1.0,
        chain3_stage2_m(r2, k2),
        1e-4,
    )
    .expect("valid stage");
    GainSchedule::new(3, 1.0, 1.0, vec![s1, s2]).expect("valid schedule")
}

/// Three-state chain law with the certified gains `R2 = K2 = 1/20`.
pub fn chain3_conservative() -> GainSchedule {
    chain3_schedule(0.05, 0.05)
}

/// Three-state chain law with the enlarged inner stage `R2 = K2 = 1`.
pub fn chain3_tuned() -> GainSchedule {
    chain3_schedule(1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Hand-simplified piecewise form of the chain law, transcribed directly.
    fn chain3_closed_form(x: &[f64], inner_radius_scale: f64, inner_gain: f64) -> f64 {
        let (x1, x2, x3) = (x[0], x[1], x[2]);
        let rho = inner_radius_scale * (x2 * x2 + (x1 + x2) * (x1 + x2)).sqrt();
        if rho < 1.0 {
            -2.0 * (x1 + x2) - inner_gain * sat(x3 + x2 + 0.5 * x1)
        } else if 8.0 * x1.abs() < 3.0 {
            -x1 - 0.25 * sat(x2 + x1)
        } else {
            -sat(x1)
        }
    }

    #[test]
    fn sat_examples() {
        assert_eq!(sat(0.0), 0.0);
        assert_eq!(sat(2.0), 1.0);
        assert_eq!(sat(0.5), 0.5);
        assert_eq!(sat(-3.0), -1.0);
    }

    #[test]
    fn sat_grid_properties() {
        for k in -5000..5000 {
            let x = k as f64 * 1e-3;
            let s = sat(x);
            assert_eq!(sat(-x), -s);
            assert!(s.abs() <= 1.0);
            if x.abs() <= 1.0 {
                assert_eq!(s, x);
            }
            let y = x + 7e-4;
            assert!((sat(y) - s).abs() <= (y - x).abs() + 1e-15);
        }
    }

    #[test]
    fn single_stage_examples() {
        let sched = chain3_conservative();
        let st = &sched.stages()[0];
        // outer branch returns fallback exactly
        assert_eq!(forwarding_feedback(&[0.5], 0.3, st, |_| 42.0), 42.0);
        assert_eq!(forwarding_feedback(&[0.0], 0.0, st, |_| 0.0), 0.0);
        let u = forwarding_feedback(&[0.1], 0.0, st, |_| unreachable!());
        assert!((u - (-0.125)).abs() < 1e-15);
    }

    #[test]
    fn single_stage_boundary_uses_fallback() {
        let sched = chain3_conservative();
        let st = &sched.stages()[0];
        assert_eq!(forwarding_feedback(&[st.r], 0.0, st, |_| 7.0), 7.0);
    }

    #[test]
    fn recursive_examples() {
        let cons = chain3_conservative();
        assert_eq!(recursive_feedback(&[1.0, 1.0, 1.0], &cons), -1.0);
        let tuned = chain3_tuned();
        assert!((recursive_feedback(&[0.0, 0.0, 0.5], &tuned) - (-0.25)).abs() < 1e-15);
        assert!((recursive_feedback(&[0.1, 0.0, 0.0], &tuned) - (-0.225)).abs() < 1e-15);
        assert_eq!(recursive_feedback(&[0.0; 3], &tuned), 0.0);
    }

    #[test]
    fn recursive_matches_hand_transcription() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let cases = [
            (chain3_conservative(), 20.0, 1.0 / 40.0),
            (chain3_tuned(), 1.0, 0.5),
        ];
        for (sched, scale, gain) in cases {
            for _ in 0..100_000 {
                let mag = 10f64.powf(rng.gen_range(-3.0..1.0));
                let x = [
                    mag * rng.gen_range(-1.0..1.0),
                    mag * rng.gen_range(-1.0..1.0),
                    mag * rng.gen_range(-1.0..1.0),
                ];
                let a = recursive_feedback(&x, &sched);
                let b = chain3_closed_form(&x, scale, gain);
                // region tests differ only in rounding of the quadratic forms
                if (a - b).abs() > 1e-12 {
                    let e2 = sched.stages()[1].energy(&x);
                    let e1 = sched.stages()[0].energy(&x);
                    let near = (e2 - sched.stages()[1].r.powi(2)).abs() < 1e-12
                        || (e1 - sched.stages()[0].r.powi(2)).abs() < 1e-12;
                    assert!(near, "x = {x:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn bound_check_examples() {
        let cons = chain3_conservative();
        let bc = bound_check(&cons, 1.0).unwrap();
        assert_eq!(bc.bound, 1.0);
        assert!(bc.within);
        // stage-1 term: R1 (|p1|/a1 + |c1'b1|) = 3/8 * 2 = 0.75 < K0

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1_000_000 {
            let mag = 10f64.powf(rng.gen_range(-4.0..3.0));
            let x = [
                mag * rng.gen_range(-1.0..1.0),
                mag * rng.gen_range(-1.0..1.0),
                mag * rng.gen_range(-1.0..1.0),
            ];
            worst = worst.max(recursive_feedback(&x, &cons).abs());
        }
        assert!(worst <= bc.bound + 1e-12);

        let tuned = chain3_tuned();
        let bt = bound_check(&tuned, 1.0).unwrap();
        assert!(bt.bound > 1.0 && !bt.within);
    }

    #[test]
    fn bound_dominated_by_k0() {
        let mut sched = chain3_conservative();
        sched.k0 = 5.0;
        assert_eq!(bound_check(&sched, 5.0).unwrap(), BoundCheck { bound: 5.0, within: true });
    }

    #[test]
    fn spec_dimension_checks() {
        let spec = ControllerSpec::RecursiveForwarding {
            schedule: chain3_tuned(),
        };
        assert!(spec.check_dim(3).is_ok());
        assert!(spec.check_dim(2).is_err());
        let json = serde_json::to_string(&spec).unwrap();
        let back: ControllerSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    proptest! {
        #[test]
        fn in_region_lipschitz(x1 in -0.3f64..0.3, x2 in -0.3f64..0.3, x3 in -3.0f64..3.0,
                               dir in prop::array::uniform3(-1.0f64..1.0)) {
            let sched = chain3_tuned();
            let st = &sched.stages()[1];
            let x = [x1, x2, x3];
            let h = 1e-6;
            let y = [x1 + h * dir[0], x2 + h * dir[1], x3 + h * dir[2]];
            prop_assume!(st.in_region(&x) && st.in_region(&y));
            let lip = st.p().norm() + st.k * st.cb().abs() * st.omega * (1.0 + st.c().norm());
            let du = (recursive_feedback(&x, &sched) - recursive_feedback(&y, &sched)).abs();
            let dx = h * (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            prop_assert!(du <= lip * dx * (1.0 + 1e-6) + 1e-15);
        }

        #[test]
        fn zero_at_origin_for_any_k0(k0 in 0.01f64..10.0, w0 in 0.01f64..10.0) {
            let mut sched = chain3_tuned();
            sched.k0 = k0;
            sched.omega0 = w0;
            prop_assert_eq!(recursive_feedback(&[0.0; 3], &sched), 0.0);
        }
    }
}
