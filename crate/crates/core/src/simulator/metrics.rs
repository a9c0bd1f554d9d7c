use serde::Serialize;

use crate::design::DesignStage;
use crate::linalg::norm;

use super::integrate::Trajectory;

/// Default tolerance grid for [`StabilityReport::time_to_ball`].
pub const EPS_GRID: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

/// Slack applied to the ball radius when deciding whether a state stays in it.
pub const BALL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GronwallReport {
    pub applicable: bool,
    pub holds: bool,
    pub worst_ratio: f64,
    pub theta: f64,
}

/// Checks `|x(t) - x(a)| <= theta/(1 - theta) |x(t)|` on a trajectory segment
/// with `theta = (G+Q)(b-a) exp(Q(b-a))`, after confirming the derivative
/// bound `|x'| <= Q|x| + G|x(a)|` by finite differences.
pub fn gronwall_check(times: &[f64], states: &[Vec<f64>], q: f64, g: f64) -> GronwallReport {
    let not_applicable = |theta| GronwallReport {
        applicable: false,
        holds: false,
        worst_ratio: f64::NAN,
        theta,
    };
    if times.len() < 2 || times.len() != states.len() {
        return not_applicable(f64::NAN);
    }
    let (a, b) = (times[0], *times.last().unwrap());
    let len = b - a;
    let theta = (g + q) * len * (q * len).exp();
    if !(theta < 1.0) {
        return not_applicable(theta);
    }
    let xa = &states[0];
    let na = norm(xa);
    for k in 0..times.len() - 1 {
        let h = times[k + 1] - times[k];
        let dx: Vec<f64> = states[k + 1].iter().zip(&states[k]).map(|(p, c)| (p - c) / h).collect();
        let bound = q * norm(&states[k]).max(norm(&states[k + 1])) + g * na;
        if norm(&dx) > bound * (1.0 + 1e-9) + 1e-300 {
            return not_applicable(theta);
        }
    }
    let factor = theta / (1.0 - theta);
    let mut worst: f64 = 0.0;
    for x in states {
        let lhs = x.iter().zip(xa).map(|(p, c)| (p - c) * (p - c)).sum::<f64>().sqrt();
        let rhs = factor * norm(x);
        let ratio = if lhs == 0.0 {
            0.0
        } else if rhs == 0.0 {
            f64::INFINITY
        } else {
            lhs / rhs
        };
        worst = worst.max(ratio);
    }
    GronwallReport {
        applicable: true,
        holds: worst <= 1.0,
        worst_ratio: worst,
        theta,
    }
}

/// First grid time after which `|x|` never exceeds `eps (1 + 1e-9)`, or
/// `None` when the final point is still outside.
pub fn time_to_ball(tr: &Trajectory, eps: f64) -> Option<f64> {
    let lim = eps * (1.0 + BALL_SLACK);
    match tr.states.iter().rposition(|x| norm(x) > lim) {
        None => tr.times.first().copied(),
        Some(k) if k + 1 == tr.len() => None,
        Some(k) => Some(tr.times[k + 1]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BallTime {
    pub eps: f64,
    pub time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub trials: usize,
    pub sup_norm: f64,
    pub time_to_ball: Vec<BallTime>,
    pub lyapunov_ratio: f64,
    pub decay_rate_mu: Option<f64>,
    pub final_norm: f64,
}

impl StabilityReport {
    pub fn ball_time(&self, eps: f64) -> Option<f64> {
        self.time_to_ball.iter().find(|b| b.eps == eps).and_then(|b| b.time)
    }
}

/// Least-squares slope of `log V` against time on the longest terminal
/// suffix of the trajectory that stays in the stage's terminal set.
pub fn fit_decay_rate(tr: &Trajectory, stage: &DesignStage) -> Option<f64> {
    let start = tr
        .states
        .iter()
        .rposition(|x| !stage.in_terminal_set(x))
        .map_or(0, |k| k + 1);
    let pts: Vec<(f64, f64)> = (start..tr.len())
        .filter_map(|i| {
            let v = stage.lyapunov(&tr.states[i]);
            (v > 1e-250).then(|| (tr.times[i], v.ln()))
        })
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm) * (p.0 - tm)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    (sxx > 0.0).then(|| -sxy / sxx)
}

/// Aggregates robust Lagrange and attractivity statistics over trials. Ball
/// times are the worst case over trials; `decay_rate_mu` is the smallest
/// fitted rate.
pub fn stability_metrics(trajs: &[Trajectory], stage: Option<&DesignStage>) -> StabilityReport {
    let sup_norm = trajs
        .iter()
        .flat_map(|t| t.states.iter().map(|x| norm(x)))
        .fold(0.0, f64::max);
    let lyapunov_ratio = trajs
        .iter()
        .map(|t| {
            let n0 = t.states.first().map_or(0.0, |x| norm(x));
            let sup = t.states.iter().map(|x| norm(x)).fold(0.0, f64::max);
            if n0 > 0.0 {
                sup / n0
            } else if sup == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    let time_to_ball = EPS_GRID
        .iter()
        .map(|&eps| {
            let mut worst = Some(0.0f64);
            for t in trajs {
                worst = match (worst, time_to_ball(t, eps)) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    _ => None,
                };
            }
            BallTime { eps, time: worst }
        })
        .collect();
    let decay_rate_mu = stage.and_then(|s| {
        trajs
            .iter()
            .map(|t| fit_decay_rate(t, s))
            .try_fold(f64::INFINITY, |acc, mu| mu.map(|m| acc.min(m)))
            .filter(|m| m.is_finite())
    });
    let final_norm = trajs.iter().map(|t| norm(t.final_state())).fold(0.0, f64::max);
    StabilityReport {
        trials: trajs.len(),
        sup_norm,
        time_to_ball,
        lyapunov_ratio,
        decay_rate_mu,
        final_norm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{make_schedule, simulate_closed_loop, DisturbanceSpec, Perturbation};
    use crate::system::{linear_decay, scalar_chain};

    fn decay_segment(len: f64, pts: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let t: Vec<f64> = (0..pts).map(|k| len * k as f64 / (pts - 1) as f64).collect();
        let x = t.iter().map(|s| vec![(-s).exp()]).collect();
        (t, x)
    }

    #[test]
    fn gronwall_constant_segment() {
        let t = vec![0.0, 0.05, 0.1];
        let x = vec![vec![2.0, -1.0]; 3];
        let r = gronwall_check(&t, &x, 0.0, 1.0);
        assert!(r.applicable && r.holds);
        assert_eq!(r.worst_ratio, 0.0);
    }

    #[test]
    fn gronwall_linear_decay() {
        let (t, x) = decay_segment(0.1, 101);
        let r = gronwall_check(&t, &x, 1.0, 0.0);
        assert!(r.applicable && r.holds, "{r:?}");
        assert!((r.theta - 0.1 * 0.1f64.exp()).abs() < 1e-15);
        assert!(r.worst_ratio < 1.0);
        // closed form: (1 - e^{-t}) / (theta/(1-theta) e^{-t}) at t = 0.1
        let th = r.theta;
        let expected = (0.1f64.exp() - 1.0) * (1.0 - th) / th;
        assert!((r.worst_ratio - expected).abs() < 1e-12);
    }

    #[test]
    fn gronwall_not_applicable_when_theta_large() {
        let (t, x) = decay_segment(1.0, 11);
        assert!(!gronwall_check(&t, &x, 1.0, 0.0).applicable);
    }

    #[test]
    fn gronwall_rejects_violated_derivative_bound() {
        let (t, x) = decay_segment(0.1, 11);
        assert!(!gronwall_check(&t, &x, 0.5, 0.0).applicable);
    }

    #[test]
    fn equilibrium_metrics() {
        let s = make_schedule(0.2, &Perturbation::Zero, 5.0).unwrap();
        let tr = simulate_closed_loop(&scalar_chain(), |x| -x[0], &[0.0], &s, &DisturbanceSpec::Zero, 0.05).unwrap();
        assert!(tr.states.iter().all(|x| x[0] == 0.0));
        let rep = stability_metrics(&[tr], None);
        assert_eq!(rep.sup_norm, 0.0);
        assert!(rep.time_to_ball.iter().all(|b| b.time == Some(0.0)));
    }

    #[test]
    fn ball_times_monotone_and_ratio_recorded() {
        let s = make_schedule(0.1, &Perturbation::Zero, 12.0).unwrap();
        let sys = linear_decay();
        let trs: Vec<_> = [1.0, 2.0]
            .iter()
            .map(|x0| simulate_closed_loop(&sys, |_| 0.0, &[*x0], &s, &DisturbanceSpec::Zero, 0.01).unwrap())
            .collect();
        let rep = stability_metrics(&trs, None);
        assert!((rep.lyapunov_ratio - 1.0).abs() < 1e-12);
        let times: Vec<f64> = rep.time_to_ball.iter().map(|b| b.time.unwrap()).collect();
        for w in times.windows(2) {
            assert!(w[0] <= w[1]);
        }
        // 2 e^{-t} = 0.01 at t = ln 200
        assert!((times[1] - 200f64.ln()).abs() < 0.011);
        assert_eq!(rep.ball_time(1e-4), Some(times[3]));
    }
}
