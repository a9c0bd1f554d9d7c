//! Design constants of the saturated forwarding stabilizer.
//!
//! A [`DesignStage`] carries the data of one forwarding step: the Lyapunov
//! matrix `P`, the linear gain `p` (with `P(A + bp') + (A' + pb')P < 0`), the
//! derived forwarding vector `c`, and the scalars `K, R, omega, M, delta`.
//! [`forwarding_constants`] builds `(R, K, M, delta)` from a growth envelope
//! of the nonlinearities; [`certify`] checks the three stage inequalities on
//! grids.

pub mod certify;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    c_vector, chain_matrices, decay_constant_q, is_neg_definite, lyapunov_sum, norm,
    sandwich_constants, Matrix, Vector,
};

pub use certify::{
    certify_coupling_bound, certify_lyapunov_decay, certify_shell_decrease, Certificate,
    Condition, GridSpec, StageMaps, WorstPoint,
};

/// One forwarding stage on the first `index` coordinates of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StageRepr", into = "StageRepr")]
pub struct DesignStage {
    index: usize,
    p_matrix: Matrix,
    p: Vector,
    c: Vector,
    pub k: f64,
    pub r: f64,
    pub omega: f64,
    pub m: f64,
    pub delta: f64,
}

#[derive(Serialize, Deserialize)]
struct StageRepr {
    index: usize,
    #[serde(rename = "P")]
    p_matrix: Matrix,
    p: Vector,
    /// Informational; recomputed on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<Vector>,
    #[serde(rename = "K")]
    k: f64,
    #[serde(rename = "R")]
    r: f64,
    omega: f64,
    #[serde(rename = "M")]
    m: f64,
    delta: f64,
}

impl TryFrom<StageRepr> for DesignStage {
    type Error = Error;
    fn try_from(s: StageRepr) -> Result<Self> {
        DesignStage::new(s.index, s.p_matrix, s.p, s.k, s.r, s.omega, s.m, s.delta)
    }
}

impl From<DesignStage> for StageRepr {
    fn from(s: DesignStage) -> Self {
        StageRepr {
            index: s.index,
            p_matrix: s.p_matrix,
            p: s.p,
            c: Some(s.c),
            k: s.k,
            r: s.r,
            omega: s.omega,
            m: s.m,
            delta: s.delta,
        }
    }
}

impl DesignStage {
    /// Validates the stage data and derives `c`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        p_matrix: Matrix,
        p: Vector,
        k: f64,
        r: f64,
        omega: f64,
        m: f64,
        delta: f64,
    ) -> Result<Self> {
        if index == 0 {
            return Err(Error::InvalidArgument("stage index starts at 1".into()));
        }
        if p_matrix.rows() != index || !p_matrix.is_square() {
            return Err(Error::DimensionMismatch {
                expected: index,
                found: p_matrix.rows(),
                context: "stage matrix P",
            });
        }
        if p.dim() != index {
            return Err(Error::DimensionMismatch {
                expected: index,
                found: p.dim(),
                context: "stage gain p",
            });
        }
        for (name, v) in [("K", k), ("R", r), ("omega", omega), ("M", m), ("delta", delta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "stage {index}: {name} must be positive and finite, got {v}"
                )));
            }
        }
        sandwich_constants(&p_matrix)?;
        let (a, b) = chain_matrices(index);
        let (neg, top) = is_neg_definite(&lyapunov_sum(&p_matrix, &a, &b, &p));
        if !neg {
            return Err(Error::NotNegativeDefinite {
                max_eigenvalue: top,
            });
        }
        let c = c_vector(&a, &b, &p)?;
        Ok(Self {
            index,
            p_matrix,
            p,
            c,
            k,
            r,
            omega,
            m,
            delta,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn dim(&self) -> usize {
        self.index
    }

    pub fn p_matrix(&self) -> &Matrix {
        &self.p_matrix
    }

    pub fn p(&self) -> &Vector {
        &self.p
    }

    pub fn c(&self) -> &Vector {
        &self.c
    }

    /// `c'b`, i.e. the first entry of `c`.
    pub fn cb(&self) -> f64 {
        self.c[0]
    }

    pub fn chain(&self) -> (Matrix, Vector) {
        chain_matrices(self.index)
    }

    /// `x'Px` on the first `index` coordinates of `x`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        self.p_matrix.quad_form(&x[..self.index])
    }

    /// `z = y + c'x` with `y = x[index]`.
    pub fn z(&self, x: &[f64]) -> f64 {
        x[self.index] + self.c.dot(&x[..self.index])
    }

    /// `V = M z^2 / 2 + x'Px / 2`.
    pub fn lyapunov(&self, x: &[f64]) -> f64 {
        let z = self.z(x);
        0.5 * self.m * z * z + 0.5 * self.energy(x)
    }

    pub fn in_region(&self, x: &[f64]) -> bool {
        self.energy(x) < self.r * self.r
    }

    /// Terminal set `{x'Px < R^2, |z| <= 1/omega}`.
    pub fn in_terminal_set(&self, x: &[f64]) -> bool {
        self.in_region(x) && self.omega * self.z(x).abs() <= 1.0
    }
}

/// Outer gains plus the ordered stages `1..n-1` of the recursive law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct GainSchedule {
    n: usize,
    pub k0: f64,
    pub omega0: f64,
    stages: Vec<DesignStage>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    n: usize,
    #[serde(rename = "K0")]
    k0: f64,
    omega0: f64,
    stages: Vec<DesignStage>,
}

impl TryFrom<ScheduleRepr> for GainSchedule {
    type Error = Error;
    fn try_from(s: ScheduleRepr) -> Result<Self> {
        GainSchedule::new(s.n, s.k0, s.omega0, s.stages)
    }
}

impl From<GainSchedule> for ScheduleRepr {
    fn from(s: GainSchedule) -> Self {
        ScheduleRepr {
            n: s.n,
            k0: s.k0,
            omega0: s.omega0,
            stages: s.stages,
        }
    }
}

impl GainSchedule {
    pub fn new(n: usize, k0: f64, omega0: f64, stages: Vec<DesignStage>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("system dimension must be positive".into()));
        }
        if !(k0 > 0.0 && omega0 > 0.0) {
            return Err(Error::InvalidArgument("K0 and omega0 must be positive".into()));
        }
        if stages.len() != n - 1 {
            return Err(Error::DimensionMismatch {
                expected: n - 1,
                found: stages.len(),
                context: "number of stages must be n - 1",
            });
        }
        for (k, s) in stages.iter().enumerate() {
            if s.index() != k + 1 {
                return Err(Error::InvalidArgument(format!(
                    "stage indices must be consecutive from 1; found {} at position {}",
                    s.index(),
                    k + 1
                )));
            }
        }
        Ok(Self {
            n,
            k0,
            omega0,
            stages,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn stages(&self) -> &[DesignStage] {
        &self.stages
    }
}

/// Non-decreasing envelope `L` bounding the nonlinearities:
/// `|f| + |g| <= L(|(x,u)|)|x|^2 + L(|(x,u)|)|x||u|`.
#[derive(Clone)]
pub struct NonlinearityBound {
    label: String,
    func: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for NonlinearityBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NonlinearityBound({})", self.label)
    }
}

impl NonlinearityBound {
    pub fn new(label: impl Into<String>, func: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            label: label.into(),
            func: Arc::new(func),
        }
    }

    pub fn zero() -> Self {
        Self::new("0", |_| 0.0)
    }

    pub fn constant(level: f64) -> Self {
        Self::new(format!("{level}"), move |_| level)
    }

    pub fn linear(slope: f64) -> Self {
        Self::new(format!("{slope}*s"), move |s| slope * s)
    }

    /// `s -> factor * L(s)`.
    pub fn scaled(&self, factor: f64) -> Self {
        let inner = self.func.clone();
        Self::new(format!("{factor}*({})", self.label), move |s| factor * inner(s))
    }

    pub fn eval(&self, s: f64) -> f64 {
        (self.func)(s)
    }

    /// Spot-checks non-negativity and monotonicity on `[0, s_max]`.
    pub fn check(&self, s_max: f64, points: usize) -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=points {
            let s = s_max * k as f64 / points as f64;
            let v = self.eval(s);
            if !(v >= 0.0) || v < prev {
                return Err(Error::InvalidArgument(format!(
                    "envelope {} is negative or decreasing near s = {s}",
                    self.label
                )));
            }
            prev = v;
        }
        Ok(())
    }
}

/// Relative tolerance of the `R*` bisection.
pub const R_STAR_RTOL: f64 = 1e-10;
/// `Q(R)` above this selects the nonlinear branch of the `M` formula.
pub const Q_BRANCH_THRESHOLD: f64 = 1e-14;
const R_STAR_CAP: f64 = 1e12;

/// Output of [`forwarding_constants`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardingConstants {
    pub q: f64,
    pub a1: f64,
    pub a2: f64,
    pub c: Vector,
    /// Ratio `C = K / R`, in `(0, 1]`.
    pub gain_ratio: f64,
    /// Largest admissible radius; `f64::INFINITY` when the envelope vanishes.
    pub r_star: f64,
    pub r: f64,
    pub k: f64,
    pub m: f64,
    pub delta_hint: f64,
    /// `Q(R)` at the selected radius.
    pub q_of_r: f64,
    pub q_branch_threshold: f64,
}

/// Constructs `(C, R*, R, K, M, delta)` for one stage from the envelope `L`.
///
/// `C` is half its admissible upper bound `min(1, q a1 / (|Pb||c'b|))`; `R*`
/// is the supremum of radii meeting the three smallness bounds on
/// `Q(R) a2 R`; `R = min(R_requested, R*(1 - 1e-3))`, `K = C R`.
pub fn forwarding_constants(
    envelope: &NonlinearityBound,
    p_matrix: &Matrix,
    p: &Vector,
    omega: f64,
    r_requested: f64,
) -> Result<ForwardingConstants> {
    if !(r_requested > 0.0 && r_requested.is_finite()) {
        return Err(Error::InfeasibleDesign(format!(
            "requested radius must be positive, got {r_requested}"
        )));
    }
    if !(omega > 0.0) {
        return Err(Error::InvalidArgument("omega must be positive".into()));
    }
    let n = p_matrix.rows();
    if p.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: p.dim(),
            context: "stage gain p",
        });
    }
    let (a, b) = chain_matrices(n);
    let (a1, a2) = sandwich_constants(p_matrix)?;
    let q = decay_constant_q(p_matrix, &a, &b, p)?;
    let c = c_vector(&a, &b, p)?;
    let cb = c[0].abs();
    let pb = norm(&p_matrix.mul_vec(b.as_slice()));
    let pn = p_matrix.spectral_norm();
    let cn = c.norm();
    let pv = p.norm();

    let c_upper = (q * a1 / (pb * cb)).min(1.0);
    let gain_ratio = 0.5 * c_upper;
    if q * a1 <= gain_ratio * pb * cb {
        return Err(Error::InfeasibleDesign(
            "q a1 does not exceed C |Pb| |c'b|".into(),
        ));
    }

    // the factor on q in the first bound is left free; take 1
    let lambda = 1.0;
    let bound_a = q * cb
        / ((1.0 + cn) * (lambda * q / (1.0 + pv) + pb) * (1.0 + pv + gain_ratio * cb / a2)
            + (1.0 + pv) * pn * cb);
    let bound_b = gain_ratio * cb * cb / ((1.0 + cn) * ((1.0 + pv) * a2 + gain_ratio * cb));
    let bound_c = (q * a1 - gain_ratio * pb * cb) / ((1.0 + pv) * pn * a2 + pn * gain_ratio * cb);
    let bound = bound_a.min(bound_b).min(bound_c);

    let q_of = |r: f64| envelope.eval((1.0 + pv) * a2 * r + r * cb);
    let phi = |r: f64| q_of(r) * a2 * r;

    let r_star = {
        let mut hi = 1.0;
        while phi(hi) < bound && hi < R_STAR_CAP {
            hi *= 2.0;
        }
        if phi(hi) < bound {
            f64::INFINITY
        } else {
            let mut lo = 0.0;
            while hi - lo > R_STAR_RTOL * hi {
                let mid = 0.5 * (lo + hi);
                if phi(mid) < bound {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        }
    };
    if !(r_star > 0.0) {
        return Err(Error::InfeasibleDesign("no positive admissible radius".into()));
    }

    let r = r_requested.min(r_star * (1.0 - 1e-3));
    let k = gain_ratio * r;
    let qr = q_of(r);
    let m = if qr > Q_BRANCH_THRESHOLD {
        gain_ratio * cb * omega / ((1.0 + cn) * qr) * (pn * qr * a2 * r + pb)
            / ((1.0 + pv) * a2 + gain_ratio * cb)
    } else {
        gain_ratio * r * pb * pb * omega / (4.0 * q) + 1.0
    };

    // alpha |x||z| - beta z^2 - gamma |x|^2 <= -delta (z^2 + |x|^2)
    let alpha = m * (1.0 + cn) * (1.0 + pv) * qr * a2 * r
        + k * pn * cb * omega * qr * a2 * r
        + k * cb * pb * omega
        + m * (1.0 + cn) * qr * k * cb;
    let beta = m * k * cb * cb * omega;
    let gamma = q - (1.0 + pv) * pn * qr * a2 * r;
    let slack = 0.5 * (gamma + beta) - (0.25 * (gamma - beta).powi(2) + 0.25 * alpha * alpha).sqrt();
    if !(slack > 0.0) {
        return Err(Error::InfeasibleDesign(format!(
            "decay inequality has no slack (min eigenvalue {slack:e})"
        )));
    }

    Ok(ForwardingConstants {
        q,
        a1,
        a2,
        c,
        gain_ratio,
        r_star,
        r,
        k,
        m,
        delta_hint: 0.5 * slack,
        q_of_r: qr,
        q_branch_threshold: Q_BRANCH_THRESHOLD,
    })
}

/// User-chosen data of one stage for [`synthesize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageChoice {
    #[serde(rename = "P")]
    pub p_matrix: Matrix,
    pub p: Vector,
    pub omega: f64,
    pub r_requested: f64,
}

/// Recursive synthesis for an `n`-state chain with growth envelope `L`:
/// stage `j` uses the envelope `j L`.
pub fn synthesize(
    n: usize,
    envelope: &NonlinearityBound,
    choices: &[StageChoice],
    k0: f64,
    omega0: f64,
) -> Result<(GainSchedule, Vec<ForwardingConstants>)> {
    if choices.len() + 1 != n {
        return Err(Error::DimensionMismatch {
            expected: n - 1,
            found: choices.len(),
            context: "one stage choice per stage",
        });
    }
    let mut stages = Vec::with_capacity(choices.len());
    let mut constants = Vec::with_capacity(choices.len());
    for (j, ch) in choices.iter().enumerate() {
        let idx = j + 1;
        let fc = forwarding_constants(
            &envelope.scaled(idx as f64),
            &ch.p_matrix,
            &ch.p,
            ch.omega,
            ch.r_requested,
        )?;
        stages.push(DesignStage::new(
            idx,
            ch.p_matrix.clone(),
            ch.p.clone(),
            fc.k,
            fc.r,
            ch.omega,
            fc.m,
            fc.delta_hint,
        )?);
        constants.push(fc);
    }
    Ok((GainSchedule::new(n, k0, omega0, stages)?, constants))
}

/// Feasibility window of the first chain stage:
/// `R^2/(1-R) < K < R` and `R + K < 1`.
pub fn chain3_stage1_feasible(r: f64, k: f64) -> bool {
    if !(r > 0.0 && r < 1.0) {
        return false;
    }
    r * r / (1.0 - r) < k && k < r && r + k < 1.0
}

/// Feasibility window of the second chain stage:
/// `4R^2/(1-2√2R) < K < 2R(1-2(2+√2)R)/(R+1)` and
/// `(4+2√2)R + (3-2√2)R^2 < 1`.
pub fn chain3_stage2_feasible(r: f64, k: f64) -> bool {
    let s2 = std::f64::consts::SQRT_2;
    let denom = 1.0 - 2.0 * s2 * r;
    if !(r > 0.0 && denom > 0.0) {
        return false;
    }
    let lower = 4.0 * r * r / denom;
    let upper = 2.0 * r * (1.0 - 2.0 * (2.0 + s2) * r) / (r + 1.0);
    lower < k && k < upper && (4.0 + 2.0 * s2) * r + (3.0 - 2.0 * s2) * r * r < 1.0
}

/// Stage-1 decay weight `M = K/(R+K)` of the chain design.
pub fn chain3_stage1_m(r: f64, k: f64) -> f64 {
    k / (r + k)
}

/// Stage-2 decay weight `M = K (2 + (3+2√2)R) / (4R)` of the chain design.
pub fn chain3_stage2_m(r: f64, k: f64) -> f64 {
    k * (2.0 + (3.0 + 2.0 * std::f64::consts::SQRT_2) * r) / (4.0 * r)
}

/// Closed-form Lyapunov data of the two-state cascade
/// `x1' = k1 d1 x1 + u, x2' = k2 d2 x2 + x1`, `|d| <= 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadeDesign {
    pub k1: f64,
    pub k2: f64,
    #[serde(rename = "P")]
    pub p_matrix: Matrix,
    pub p: Vector,
    #[serde(rename = "S")]
    pub s: f64,
    pub q: f64,
}

pub fn cascade_design(k1: f64, k2: f64) -> Result<CascadeDesign> {
    if !(k1 >= 0.0 && k2 >= 0.0) {
        return Err(Error::InvalidArgument("k1 and k2 must be non-negative".into()));
    }
    let m = 1.0 + k2;
    let p_matrix = Matrix::from_rows(&[[1.0, m], [m, m * m + 1.0]])?;
    let s = 0.5 + k1 + 0.5 * m * m * (k2 + k1).powi(2);
    let p = Vector::new(vec![-(1.0 + s + k2), -(1.0 + s * m)]);
    let root = (m * m + 4.0).sqrt();
    let q = (root - 1.0 - k2) / (2.0 + 2.0 * k2 + 2.0 * root);
    Ok(CascadeDesign {
        k1,
        k2,
        p_matrix,
        p,
        s,
        q,
    })
}

/// Smallest normalized slack of `x'P(A+bp')x + x'Pf(d,x) <= -q|x|^2` over
/// `samples` seeded random directions, taking the worst `d` in `[-1,1]^2`
/// (the left side is affine in `d`, so the corners suffice).
pub fn cascade_decay_margin(design: &CascadeDesign, samples: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = chain_matrices(2);
    let acl = crate::linalg::closed_loop(&a, &b, &design.p);
    let pm = &design.p_matrix;
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let nx2 = x[0] * x[0] + x[1] * x[1];
        if nx2 == 0.0 {
            continue;
        }
        let px = pm.mul_vec(&x);
        let nominal = crate::linalg::dot(&px, &acl.mul_vec(&x));
        let pert = (px[0] * design.k1 * x[0]).abs() + (px[1] * design.k2 * x[1]).abs();
        let slack = (-design.q * nx2 - nominal - pert) / nx2;
        worst = worst.min(slack);
    }
    worst
}

/// Admissible gain interval of the single-stage cascade design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainWindow {
    pub k_lo: f64,
    pub k_hi: f64,
    /// Midpoint of the window.
    pub k: f64,
    pub m: f64,
    /// Small-gain threshold that `L1` must stay below.
    pub l1_threshold: f64,
}

/// Gain window `(1+|c|)L1 a2 R/|c'b|^2 < K < q a1 R/(|Pb||c'b|)` and
/// `M = K|c'b| omega |Pb| / ((1+|c|) L1)` evaluated at the midpoint.
#[allow(clippy::too_many_arguments)]
pub fn cascade_gain_window(
    l1: f64,
    p_matrix: &Matrix,
    c: &Vector,
    q: f64,
    r: f64,
    a1: f64,
    a2: f64,
    omega: f64,
) -> Result<GainWindow> {
    let n = p_matrix.rows();
    let (_, b) = chain_matrices(n);
    let cb = c[0].abs();
    let pb = norm(&p_matrix.mul_vec(b.as_slice()));
    let cn = c.norm();
    let l1_threshold = q * a1 * cb / ((1.0 + cn) * a2 * pb);
    if !(l1 > 0.0) {
        return Err(Error::InvalidArgument("L1 must be positive".into()));
    }
    if !(l1 < l1_threshold) {
        return Err(Error::SmallGainViolated {
            l1,
            threshold: l1_threshold,
        });
    }
    let k_lo = (1.0 + cn) * l1 * a2 * r / (cb * cb);
    let k_hi = q * a1 * r / (pb * cb);
    let k = 0.5 * (k_lo + k_hi);
    let m = k * cb * omega * pb / ((1.0 + cn) * l1);
    Ok(GainWindow {
        k_lo,
        k_hi,
        k,
        m,
        l1_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stage1_data() -> (Matrix, Vector) {
        (Matrix::identity(1), Vector::new(vec![-1.0]))
    }

    #[test]
    fn chain3_stage1_window() {
        assert!(chain3_stage1_feasible(3.0 / 8.0, 0.25));
        assert!(!chain3_stage1_feasible(0.5, 0.6));
        assert!(chain3_stage1_feasible(0.1, 0.05));
    }

    #[test]
    fn chain3_stage2_window() {
        assert!(chain3_stage2_feasible(0.05, 0.05));
        assert!(!chain3_stage2_feasible(1.0, 1.0));
        assert!(chain3_stage2_feasible(0.01, 0.001));
    }

    #[test]
    fn feasibility_monotone_towards_known_point() {
        // convex combination from an infeasible pair toward the printed pair
        let checks: [(fn(f64, f64) -> bool, (f64, f64), (f64, f64)); 2] = [
            (chain3_stage1_feasible, (0.6, 0.7), (3.0 / 8.0, 0.25)),
            (chain3_stage2_feasible, (0.2, 0.3), (0.05, 0.05)),
        ];
        for (f, far, good) in checks {
            let mut seen_true = false;
            for s in 0..=100 {
                let t = s as f64 / 100.0;
                let r = (1.0 - t) * far.0 + t * good.0;
                let k = (1.0 - t) * far.1 + t * good.1;
                let v = f(r, k);
                assert!(!(seen_true && !v), "flip true->false at t={t}");
                seen_true |= v;
            }
            assert!(seen_true);
        }
    }

    #[test]
    fn linear_envelope_gives_unbounded_radius() {
        let (pm, p) = stage1_data();
        let fc = forwarding_constants(&NonlinearityBound::zero(), &pm, &p, 1.0, 2.0).unwrap();
        assert!(fc.r_star.is_infinite());
        assert_eq!(fc.r, 2.0);
        assert_relative_eq!(fc.k, fc.gain_ratio * 2.0);
        // M = C R |Pb|^2 omega / (4q) + 1 with |Pb| = q = 1
        assert_relative_eq!(fc.m, fc.gain_ratio * 2.0 / 4.0 + 1.0, epsilon = 1e-15);
        assert!(fc.delta_hint > 0.0);
    }

    #[test]
    fn chain3_stage1_constants_are_feasible() {
        let (pm, p) = stage1_data();
        let fc = forwarding_constants(&NonlinearityBound::constant(1.0), &pm, &p, 1.0, 1.0).unwrap();
        assert!(fc.r_star.is_finite());
        assert!(fc.k <= fc.r && fc.gain_ratio <= 1.0);
        assert!(chain3_stage1_feasible(fc.r, fc.k), "{fc:?}");
        // with L = 1 the binding bound is C(c'b)^2/((1+|c|)((1+|p|)a2 + C|c'b|)) = 0.1
        assert_relative_eq!(fc.r_star, 0.1, max_relative = 1e-9);
    }

    #[test]
    fn zero_radius_is_infeasible() {
        let (pm, p) = stage1_data();
        let err = forwarding_constants(&NonlinearityBound::zero(), &pm, &p, 1.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::InfeasibleDesign(_)));
    }

    #[test]
    fn non_stabilizing_gain_rejected() {
        let (pm, _) = stage1_data();
        let err = forwarding_constants(
            &NonlinearityBound::zero(),
            &pm,
            &Vector::new(vec![1.0]),
            1.0,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotNegativeDefinite { .. }));
    }

    #[test]
    fn cascade_design_values() {
        let d = cascade_design(1.0, 1.0).unwrap();
        assert_eq!(d.p_matrix, Matrix::from_rows(&[[1.0, 2.0], [2.0, 5.0]]).unwrap());
        assert_eq!(d.s, 9.5);
        assert_eq!(d.p.as_slice(), &[-11.5, -20.0]);

        let d0 = cascade_design(0.0, 0.0).unwrap();
        let s5 = 5f64.sqrt();
        assert_relative_eq!(d0.q, (s5 - 1.0) / (2.0 + 2.0 * s5), epsilon = 1e-15);
    }

    #[test]
    fn cascade_printed_q_is_valid_but_not_tight() {
        let d0 = cascade_design(0.0, 0.0).unwrap();
        let (a, b) = chain_matrices(2);
        let q = decay_constant_q(&d0.p_matrix, &a, &b, &d0.p).unwrap();
        // eigenvalue oracle: symmetric part [[-1/2,-1/2],[-1/2,-3/2]], top = -1 + 1/sqrt 2
        assert_relative_eq!(q, 1.0 - std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert!(q >= d0.q);
    }

    #[test]
    fn cascade_det_is_one_on_grid() {
        for i in 1..=20 {
            for j in 1..=20 {
                let d = cascade_design(0.15 * i as f64, 0.15 * j as f64).unwrap();
                let pm = &d.p_matrix;
                let det = pm[(0, 0)] * pm[(1, 1)] - pm[(0, 1)] * pm[(1, 0)];
                assert_relative_eq!(det, 1.0, epsilon = 1e-9);
                assert!(sandwich_constants(pm).is_ok());
            }
        }
    }

    #[test]
    fn gain_window_behaviour() {
        let d = cascade_design(0.5, 0.5).unwrap();
        let (a, b) = chain_matrices(2);
        let c = c_vector(&a, &b, &d.p).unwrap();
        let (a1, a2) = sandwich_constants(&d.p_matrix).unwrap();
        let probe = cascade_gain_window(1e-12, &d.p_matrix, &c, d.q, 1.0, a1, a2, 1.0).unwrap();
        let pb = norm(&d.p_matrix.mul_vec(b.as_slice()));
        assert!(probe.k_lo < 1e-9);
        assert_relative_eq!(probe.k_hi, d.q * a1 / (pb * c[0].abs()), epsilon = 1e-15);

        let thr = probe.l1_threshold;
        let w = cascade_gain_window(0.99 * thr, &d.p_matrix, &c, d.q, 1.0, a1, a2, 1.0).unwrap();
        assert!(w.k_lo < w.k_hi);
        assert!((w.k_hi - w.k_lo) / w.k_hi < 0.02);

        let err = cascade_gain_window(1.01 * thr, &d.p_matrix, &c, d.q, 1.0, a1, a2, 1.0).unwrap_err();
        assert!(matches!(err, Error::SmallGainViolated { .. }));
    }

    #[test]
    fn stage_rejects_bad_dimensions() {
        let err = DesignStage::new(
            2,
            Matrix::identity(1),
            Vector::new(vec![-1.0]),
            0.1,
            0.1,
            1.0,
            1.0,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn schedule_json_round_trip() {
        let s1 = DesignStage::new(1, Matrix::identity(1), Vector::new(vec![-1.0]), 0.25, 0.375, 1.0, 0.4, 1e-4)
            .unwrap();
        let sched = GainSchedule::new(2, 1.0, 1.0, vec![s1]).unwrap();
        let text = serde_json::to_string(&sched).unwrap();
        let back: GainSchedule = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sched);
    }
}
