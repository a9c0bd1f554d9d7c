//! Grid certification of the three stage inequalities.
//!
//! * shell decrease: `x'P(Ax + f + bu) < 0` on `x'Px = R^2`, `|u - p'x| <= K|c'b|`;
//! * coupling bound: `|g + c'f| < K (c'b)^2` on `x'Px <= R^2`, same input slab;
//! * Lyapunov decay: for `x'Px <= R^2`, `omega|z| <= 1`, `u = p'x - K c'b omega z`,
//!   `z(Mg + Mc'f - K c'b omega b'Px) <= (MK(c'b)^2 omega - delta) z^2 - x'P((A + bp' + delta I)x + f)`.
//!
//! Points come from a deterministic product grid (ellipsoid shells through
//! the Cholesky factor of `P`) plus a Halton sequence over the same domain.
//! Evaluation is split across the rayon pool; the reduction is keyed on
//! `(value, index)` so the result does not depend on scheduling.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignStage;
use crate::error::{Error, Result};
use crate::linalg::{dot, symmetric_eigenvalues, Matrix};
use crate::system::{linspace, DisturbanceBox, SystemModel};

type VecMap = dyn Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync;
type ScalarMap = dyn Fn(&[f64], &[f64], f64) -> f64 + Send + Sync;

/// Nonlinear terms `f(d, x, u)` and `g(d, x, u)` of one forwarding stage.
#[derive(Clone)]
pub struct StageMaps {
    dim: usize,
    f: Arc<VecMap>,
    g: Arc<ScalarMap>,
}

impl StageMaps {
    pub fn new(dim: usize, f: Arc<VecMap>, g: Arc<ScalarMap>) -> Self {
        Self { dim, f, g }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(
            dim,
            Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
            Arc::new(|_, _, _| 0.0),
        )
    }

    /// Splits stage `j` of a chain-structured plant into its linear part and
    /// the nonlinear remainders `f` (first `j` rows) and `g` (row `j+1`).
    /// Coordinates beyond `j` are set to zero when evaluating the plant.
    pub fn from_chain(sys: &SystemModel, j: usize) -> Result<Self> {
        let n = sys.dim();
        if j == 0 || j >= n {
            return Err(Error::DimensionMismatch {
                expected: n - 1,
                found: j,
                context: "stage index must lie in 1..n-1",
            });
        }
        let sys_f = sys.clone();
        let sys_g = sys.clone();
        let f = move |d: &[f64], x: &[f64], u: f64, out: &mut [f64]| {
            let mut full = vec![0.0; n];
            full[..j].copy_from_slice(&x[..j]);
            let mut fx = vec![0.0; n];
            sys_f.eval(d, &full, u, &mut fx);
            out[0] = fx[0] - u;
            for k in 1..j {
                out[k] = fx[k] - x[k - 1];
            }
        };
        let g = move |d: &[f64], x: &[f64], u: f64| {
            let mut full = vec![0.0; n];
            full[..j].copy_from_slice(&x[..j]);
            let mut fx = vec![0.0; n];
            sys_g.eval(d, &full, u, &mut fx);
            fx[j] - x[j - 1]
        };
        Ok(Self::new(j, Arc::new(f), Arc::new(g)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn f(&self, d: &[f64], x: &[f64], u: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.f)(d, x, u, &mut out);
        out
    }

    pub fn g(&self, d: &[f64], x: &[f64], u: f64) -> f64 {
        (self.g)(d, x, u)
    }
}

/// Grid resolution of a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub angular: usize,
    pub radial: usize,
    pub slab: usize,
    pub disturbance: usize,
    pub quasi_random: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            angular: 64,
            radial: 16,
            slab: 9,
            disturbance: 5,
            quasi_random: 10_000,
        }
    }
}

impl GridSpec {
    /// Every axis doubled.
    pub fn refined(&self) -> Self {
        Self {
            angular: self.angular * 2,
            radial: self.radial * 2,
            slab: self.slab * 2 - 1,
            disturbance: self.disturbance * 2 - 1,
            quasi_random: self.quasi_random * 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    ShellDecrease,
    CouplingBound,
    LyapunovDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstPoint {
    pub x: Vec<f64>,
    pub u: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub condition: Condition,
    pub pass: bool,
    pub margin: f64,
    pub grid: GridSpec,
    pub grid_points: usize,
    pub worst_point: WorstPoint,
}

/// `delta` scaled to the quadratic form: `1e-4 * lambda_max(P)`.
pub fn default_delta(p_matrix: &Matrix) -> f64 {
    1e-4 * symmetric_eigenvalues(p_matrix).last().copied().unwrap_or(1.0)
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % b) as f64 * f;
        i /= b;
        f *= inv;
    }
    r
}

fn halton(index: u64, dims: usize) -> Vec<f64> {
    (0..dims)
        .map(|k| radical_inverse(index + 1, PRIMES[k % PRIMES.len()]))
        .collect()
}

/// Number of unit-cube parameters consumed by [`direction_from_unit`].
fn direction_params(n: usize) -> usize {
    match n {
        1 => 1,
        2 => 1,
        3 => 2,
        _ => n,
    }
}

fn direction_from_unit(n: usize, u: &[f64]) -> Vec<f64> {
    match n {
        1 => vec![if u[0] < 0.5 { -1.0 } else { 1.0 }],
        2 => {
            let th = std::f64::consts::TAU * u[0];
            vec![th.cos(), th.sin()]
        }
        3 => {
            let cz = 2.0 * u[0] - 1.0;
            let sz = (1.0 - cz * cz).max(0.0).sqrt();
            let th = std::f64::consts::TAU * u[1];
            vec![sz * th.cos(), sz * th.sin(), cz]
        }
        _ => {
            let v: Vec<f64> = u.iter().map(|t| 2.0 * t - 1.0).collect();
            let nv = dot(&v, &v).sqrt().max(1e-300);
            v.into_iter().map(|a| a / nv).collect()
        }
    }
}

fn grid_directions(n: usize, angular: usize) -> Vec<Vec<f64>> {
    match n {
        1 => vec![vec![-1.0], vec![1.0]],
        2 => (0..angular)
            .map(|k| {
                let th = std::f64::consts::TAU * k as f64 / angular as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        3 => {
            let polar = (angular / 2).max(1);
            let mut out = vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, -1.0]];
            for j in 0..polar {
                let ph = std::f64::consts::PI * (j as f64 + 0.5) / polar as f64;
                for k in 0..angular {
                    let th = std::f64::consts::TAU * k as f64 / angular as f64;
                    out.push(vec![ph.sin() * th.cos(), ph.sin() * th.sin(), ph.cos()]);
                }
            }
            out
        }
        _ => (0..angular * angular)
            .map(|i| direction_from_unit(n, &halton(i as u64, n)))
            .collect(),
    }
}

/// Unit sphere in the `P`-metric: `x = R L'^{-1} s` with `P = L L'`.
struct Ellipsoid {
    map: Matrix,
}

impl Ellipsoid {
    fn new(p_matrix: &Matrix) -> Result<Self> {
        let l = p_matrix.cholesky()?;
        let lt = l.transpose();
        let n = p_matrix.rows();
        let mut map = Matrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = lt.solve(&e)?;
            for i in 0..n {
                map[(i, j)] = col[i];
            }
        }
        Ok(Self { map })
    }

    fn point(&self, s: &[f64], radius: f64) -> Vec<f64> {
        self.map.mul_vec(s).into_iter().map(|v| v * radius).collect()
    }
}

/// A candidate `(x, a, d)` where `a` is the slab offset `v` or the `z` value.
struct Sample {
    x: Vec<f64>,
    a: f64,
    d: Vec<f64>,
}

enum Region {
    Shell,
    Solid,
}

fn samples(
    stage: &DesignStage,
    dbox: &DisturbanceBox,
    grid: &GridSpec,
    region: Region,
    slab_half_width: f64,
) -> Result<Vec<Sample>> {
    let n = stage.dim();
    let ell = Ellipsoid::new(stage.p_matrix())?;
    let dirs = grid_directions(n, grid.angular);
    let radii: Vec<f64> = match region {
        Region::Shell => vec![stage.r],
        Region::Solid => linspace(0.0, stage.r, grid.radial.max(2)),
    };
    let slab = linspace(-slab_half_width, slab_half_width, grid.slab.max(2));
    let dgrid = dbox.grid(grid.disturbance);

    let mut out = Vec::new();
    for &rad in &radii {
        let ring: Vec<Vec<f64>> = if rad == 0.0 {
            vec![vec![0.0; n]]
        } else {
            dirs.iter().map(|s| ell.point(s, rad)).collect()
        };
        for x in &ring {
            for &a in &slab {
                for d in &dgrid {
                    out.push(Sample {
                        x: x.clone(),
                        a,
                        d: d.clone(),
                    });
                }
            }
        }
    }

    let dp = direction_params(n);
    let solid = matches!(region, Region::Solid);
    let total = dp + usize::from(solid) + 1 + dbox.dim();
    for i in 0..grid.quasi_random {
        let h = halton(i as u64, total);
        let s = direction_from_unit(n, &h[..dp]);
        let mut k = dp;
        let rad = if solid {
            k += 1;
            stage.r * h[dp].powf(1.0 / n as f64)
        } else {
            stage.r
        };
        let a = -slab_half_width + 2.0 * slab_half_width * h[k];
        k += 1;
        out.push(Sample {
            x: ell.point(&s, rad),
            a,
            d: dbox.from_unit(&h[k..]),
        });
    }
    Ok(out)
}

/// Index and value of the largest `value`, ties broken by the smaller index.
/// NaN counts as the largest value.
fn keyed_max(values: impl IndexedParallelIterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .map(|(i, v)| (i, if v.is_nan() { f64::INFINITY } else { v }))
        .reduce(
            || (usize::MAX, f64::NEG_INFINITY),
            |a, b| match a.1.total_cmp(&b.1) {
                std::cmp::Ordering::Greater => a,
                std::cmp::Ordering::Less => b,
                std::cmp::Ordering::Equal => {
                    if a.0 <= b.0 {
                        a
                    } else {
                        b
                    }
                }
            },
        )
}

fn check_dims(maps: &StageMaps, stage: &DesignStage) -> Result<()> {
    if maps.dim() != stage.dim() {
        return Err(Error::DimensionMismatch {
            expected: stage.dim(),
            found: maps.dim(),
            context: "nonlinearity dimension vs stage",
        });
    }
    Ok(())
}

/// Shell-decrease certificate; margin is `-max x'P(Ax + f + bu)` on the shell.
pub fn certify_shell_decrease(
    maps: &StageMaps,
    dbox: &DisturbanceBox,
    stage: &DesignStage,
    grid: &GridSpec,
) -> Result<Certificate> {
    check_dims(maps, stage)?;
    let (a, b) = stage.chain();
    let half = stage.k * stage.cb().abs();
    let pts = samples(stage, dbox, grid, Region::Shell, half)?;
    let pm = stage.p_matrix();
    let eval = |s: &Sample| {
        let u = stage.p().dot(&s.x) + s.a;
        let f = maps.f(&s.d, &s.x, u);
        let ax = a.mul_vec(&s.x);
        let rhs: Vec<f64> = (0..stage.dim())
            .map(|i| ax[i] + f[i] + b[i] * u)
            .collect();
        dot(&pm.mul_vec(&s.x), &rhs)
    };
    let (idx, worst) = keyed_max(pts.par_iter().map(eval));
    let margin = -worst;
    let s = &pts[idx];
    Ok(Certificate {
        condition: Condition::ShellDecrease,
        pass: margin > 0.0,
        margin,
        grid: *grid,
        grid_points: pts.len(),
        worst_point: WorstPoint {
            x: s.x.clone(),
            u: stage.p().dot(&s.x) + s.a,
            z: None,
            d: s.d.clone(),
        },
    })
}

/// Coupling-bound certificate; margin is `K(c'b)^2 - max |g + c'f|`.
pub fn certify_coupling_bound(
    maps: &StageMaps,
    dbox: &DisturbanceBox,
    stage: &DesignStage,
    grid: &GridSpec,
) -> Result<Certificate> {
    check_dims(maps, stage)?;
    let half = stage.k * stage.cb().abs();
    let pts = samples(stage, dbox, grid, Region::Solid, half)?;
    let eval = |s: &Sample| {
        let u = stage.p().dot(&s.x) + s.a;
        let f = maps.f(&s.d, &s.x, u);
        (maps.g(&s.d, &s.x, u) + stage.c().dot(&f)).abs()
    };
    let (idx, worst) = keyed_max(pts.par_iter().map(eval));
    let margin = stage.k * stage.cb() * stage.cb() - worst;
    let s = &pts[idx];
    Ok(Certificate {
        condition: Condition::CouplingBound,
        pass: margin > 0.0,
        margin,
        grid: *grid,
        grid_points: pts.len(),
        worst_point: WorstPoint {
            x: s.x.clone(),
            u: stage.p().dot(&s.x) + s.a,
            z: None,
            d: s.d.clone(),
        },
    })
}

/// Lyapunov-decay certificate; margin is the smallest
/// `(RHS - LHS) / (|x|^2 + z^2)` over grid points other than the origin.
pub fn certify_lyapunov_decay(
    maps: &StageMaps,
    dbox: &DisturbanceBox,
    stage: &DesignStage,
    grid: &GridSpec,
) -> Result<Certificate> {
    check_dims(maps, stage)?;
    let (a, b) = stage.chain();
    let n = stage.dim();
    let cb = stage.cb();
    let (m, k, omega, delta) = (stage.m, stage.k, stage.omega, stage.delta);
    let pts = samples(stage, dbox, grid, Region::Solid, 1.0 / omega)?;
    let pm = stage.p_matrix();
    let u_of = |s: &Sample| stage.p().dot(&s.x) - k * cb * omega * s.a;
    let eval = |s: &Sample| {
        let z = s.a;
        let scale = dot(&s.x, &s.x) + z * z;
        if scale == 0.0 {
            return f64::NEG_INFINITY;
        }
        let u = u_of(s);
        let f = maps.f(&s.d, &s.x, u);
        let g = maps.g(&s.d, &s.x, u);
        let px = pm.mul_vec(&s.x);
        let lhs = z * (m * g + m * stage.c().dot(&f) - k * cb * omega * dot(b.as_slice(), &px));
        let ax = a.mul_vec(&s.x);
        let pxp = stage.p().dot(&s.x);
        let drift: Vec<f64> = (0..n)
            .map(|i| ax[i] + b[i] * pxp + delta * s.x[i] + f[i])
            .collect();
        let rhs = (m * k * cb * cb * omega - delta) * z * z - dot(&px, &drift);
        // negate so keyed_max finds the smallest slack
        -(rhs - lhs) / scale
    };
    let (idx, worst) = keyed_max(pts.par_iter().map(eval));
    let margin = -worst;
    let s = &pts[idx];
    Ok(Certificate {
        condition: Condition::LyapunovDecay,
        pass: margin > 0.0,
        margin,
        grid: *grid,
        grid_points: pts.len(),
        worst_point: WorstPoint {
            x: s.x.clone(),
            u: u_of(s),
            z: Some(s.a),
            d: s.d.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{chain3_stage1_m, chain3_stage2_m};
    use crate::linalg::{norm, sandwich_constants, Matrix, Vector};
    use crate::system::chain3;

    fn stage1(r: f64, k: f64, m: f64, delta: f64) -> DesignStage {
        DesignStage::new(1, Matrix::identity(1), Vector::new(vec![-1.0]), k, r, 1.0, m, delta).unwrap()
    }

    fn stage2(r: f64, k: f64) -> DesignStage {
        DesignStage::new(
            2,
            Matrix::from_rows(&[[1.0, 1.0], [1.0, 2.0]]).unwrap(),
            Vector::new(vec![-2.0, -2.0]),
            k,
            r,
            1.0,
            chain3_stage2_m(r, k),
            1e-4,
        )
        .unwrap()
    }

    #[test]
    fn chain_maps_split_plant() {
        let sys = chain3();
        let m1 = StageMaps::from_chain(&sys, 1).unwrap();
        assert_eq!(m1.f(&[], &[0.3], 2.0), vec![0.0]);
        assert!((m1.g(&[], &[0.3], 2.0) - 0.6).abs() < 1e-15);
        let m2 = StageMaps::from_chain(&sys, 2).unwrap();
        let f2 = m2.f(&[], &[0.3, 0.7], 2.0);
        assert!(f2[0] == 0.0 && (f2[1] - 0.6).abs() < 1e-15);
        assert!((m2.g(&[], &[0.3, 0.7], 2.0) - 0.09).abs() < 1e-15);
        assert!(StageMaps::from_chain(&sys, 3).is_err());
    }

    #[test]
    fn chain3_stage1_certificates_pass() {
        let sys = chain3();
        let maps = StageMaps::from_chain(&sys, 1).unwrap();
        let (r, k) = (3.0 / 8.0, 0.25);
        let st = stage1(r, k, chain3_stage1_m(r, k), 1e-4);
        let g = GridSpec::default();
        let dbox = DisturbanceBox::empty();
        for cert in [
            certify_shell_decrease(&maps, &dbox, &st, &g).unwrap(),
            certify_coupling_bound(&maps, &dbox, &st, &g).unwrap(),
            certify_lyapunov_decay(&maps, &dbox, &st, &g).unwrap(),
        ] {
            assert!(cert.pass, "{cert:?}");
        }
    }

    #[test]
    fn shell_decrease_linear_analytic_bound() {
        // f = 0: worst value is -q R^2/lambda_max-ish; pass when K|c'b||Pb| < q a1 R
        let st = stage2(0.5, 0.05);
        let (a1, _) = sandwich_constants(st.p_matrix()).unwrap();
        let pb = norm(&st.p_matrix().mul_vec(&[1.0, 0.0]));
        let (a, b) = st.chain();
        let q = crate::linalg::decay_constant_q(st.p_matrix(), &a, &b, st.p()).unwrap();
        assert!(st.k * st.cb().abs() * pb < q * a1 * st.r);
        let maps = StageMaps::zero(2);
        let cert =
            certify_shell_decrease(&maps, &DisturbanceBox::empty(), &st, &GridSpec::default()).unwrap();
        assert!(cert.pass);

        let k_big = 10.0 * q * a1 * st.r / (pb * st.cb().abs());
        let st_big = stage2(0.5, k_big);
        let cert =
            certify_shell_decrease(&maps, &DisturbanceBox::empty(), &st_big, &GridSpec::default()).unwrap();
        assert!(!cert.pass, "{cert:?}");
    }

    #[test]
    fn coupling_bound_zero_nonlinearity_margin() {
        let st = stage2(0.5, 0.05);
        let cert =
            certify_coupling_bound(&StageMaps::zero(2), &DisturbanceBox::empty(), &st, &GridSpec::default())
                .unwrap();
        assert!(cert.pass);
        assert_eq!(cert.margin, st.k * st.cb() * st.cb());
    }

    #[test]
    fn lyapunov_decay_linear_case_depends_on_m() {
        let st = stage2(0.5, 0.05);
        let (a, b) = st.chain();
        let q = crate::linalg::decay_constant_q(st.p_matrix(), &a, &b, st.p()).unwrap();
        let pb = norm(&st.p_matrix().mul_vec(&[1.0, 0.0]));
        let m_ok = st.k * pb * pb * st.omega / (4.0 * q) + 1.0;
        let mk = |m: f64, delta: f64| {
            DesignStage::new(2, st.p_matrix().clone(), st.p().clone(), st.k, st.r, 1.0, m, delta).unwrap()
        };
        let g = GridSpec::default();
        let zero = StageMaps::zero(2);
        let dbox = DisturbanceBox::empty();
        assert!(certify_lyapunov_decay(&zero, &dbox, &mk(m_ok, 1e-6), &g).unwrap().pass);
        assert!(!certify_lyapunov_decay(&zero, &dbox, &mk(1e-3, 1e-6), &g).unwrap().pass);
        // delta above the z^2 coefficient
        let too_big = 2.0 * m_ok * st.k * st.cb() * st.cb();
        assert!(!certify_lyapunov_decay(&zero, &dbox, &mk(m_ok, too_big), &g).unwrap().pass);
    }

    #[test]
    fn chain3_stage2_coupling_passes() {
        let sys = chain3();
        let maps = StageMaps::from_chain(&sys, 2).unwrap();
        let st = stage2(0.05, 0.05);
        let cert = certify_coupling_bound(&maps, &DisturbanceBox::empty(), &st, &GridSpec::default()).unwrap();
        assert!(cert.pass, "{cert:?}");
    }

    #[test]
    fn dimension_mismatch_reported() {
        let st = stage2(0.05, 0.05);
        let err = certify_coupling_bound(&StageMaps::zero(1), &DisturbanceBox::empty(), &st, &GridSpec::default())
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn certificate_is_deterministic_across_pools() {
        let sys = chain3();
        let maps = StageMaps::from_chain(&sys, 2).unwrap();
        let st = stage2(0.05, 0.05);
        let g = GridSpec::default();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| certify_lyapunov_decay(&maps, &DisturbanceBox::empty(), &st, &g).unwrap());
        let b = four.install(|| certify_lyapunov_decay(&maps, &DisturbanceBox::empty(), &st, &g).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn refining_grid_does_not_raise_margin_much() {
        let sys = chain3();
        let maps = StageMaps::from_chain(&sys, 2).unwrap();
        let st = stage2(0.05, 0.05);
        let coarse = GridSpec::default();
        let fine = coarse.refined();
        let dbox = DisturbanceBox::empty();
        for f in [certify_shell_decrease, certify_coupling_bound, certify_lyapunov_decay] {
            let a = f(&maps, &dbox, &st, &coarse).unwrap();
            let b = f(&maps, &dbox, &st, &fine).unwrap();
            assert!(b.margin <= a.margin + 1e-3 * a.margin.abs().max(1e-9), "{a:?} vs {b:?}");
        }
    }
}
