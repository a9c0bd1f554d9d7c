use sdfwd::controller::{chain3_conservative, chain3_tuned, recursive_feedback, ControllerSpec};
use sdfwd::simulator::{
    make_schedule, simulate_closed_loop, stability_metrics, DisturbanceSpec, Perturbation, Schedule,
};
use sdfwd::system::{chain3, linear_decay};

fn chain_run(schedule: &sdfwd::design::GainSchedule, x0: [f64; 3], r: f64, w: Perturbation, horizon: f64) -> sdfwd::simulator::Trajectory {
    let s = make_schedule(r, &w, horizon).unwrap();
    simulate_closed_loop(&chain3(), |x| recursive_feedback(x, schedule), &x0, &s, &DisturbanceSpec::Zero, 2e-3).unwrap()
}

#[test]
fn certified_gains_keep_inner_stage_properties() {
    let sched = chain3_conservative();
    let st = &sched.stages()[1];
    let cases = [
        ([1.0, 1.0, 1.0], 0.05, Perturbation::AbsSine),
        ([0.5, -2.0, 3.0], 0.05, Perturbation::Seeded { seed: 3, max: 2.0 }),
    ];
    for (x0, r, w) in cases {
        let tr = chain_run(&sched, x0, r, w, 1500.0);
        let entry = tr
            .sample_indices()
            .find(|&i| st.in_region(&tr.states[i][..2]))
            .expect("enters the inner region");
        let bound = st.z(&tr.states[entry]).abs().max(1.0 / st.omega) + 1e-6;
        for x in &tr.states[entry..] {
            assert!(st.in_region(&x[..2]));
            assert!(st.z(x).abs() <= bound);
        }
        let samples: Vec<usize> = tr.sample_indices().collect();
        let mut pairs = 0;
        for w in samples.windows(2) {
            let (a, b) = (&tr.states[w[0]], &tr.states[w[1]]);
            if st.in_terminal_set(a) && st.in_terminal_set(b) {
                pairs += 1;
                assert!(st.lyapunov(b) <= st.lyapunov(a));
            }
        }
        assert!(pairs > 1000);
    }
}

#[test]
fn tuned_gains_decay_exponentially_near_origin() {
    let sched = chain3_tuned();
    let tr = chain_run(&sched, [1.0, 1.0, 1.0], 0.2, Perturbation::AbsSine, 100.0);
    let rep = stability_metrics(&[tr], sched.stages().last());
    let mu = rep.decay_rate_mu.expect("terminal segment present");
    assert!(mu > 0.0, "{rep:?}");
    let t3 = rep.ball_time(1e-3).expect("reaches 1e-3 ball");
    assert!(t3 < 100.0);
}

#[test]
fn equilibrium_is_preserved() {
    for sched in [chain3_tuned(), chain3_conservative()] {
        let tr = chain_run(&sched, [0.0; 3], 0.1, Perturbation::AbsSine, 5.0);
        assert!(tr.states.iter().flatten().all(|v| *v == 0.0));
        assert!(tr.inputs.iter().all(|u| *u == 0.0));
    }
}

#[test]
fn controller_spec_matches_direct_law() {
    let sched = chain3_tuned();
    let spec = ControllerSpec::RecursiveForwarding {
        schedule: sched.clone(),
    };
    let s = make_schedule(0.2, &Perturbation::AbsSine, 20.0).unwrap();
    let a = simulate_closed_loop(&chain3(), |x| spec.evaluate(x), &[1.0, 1.0, 1.0], &s, &DisturbanceSpec::Zero, 1e-2).unwrap();
    let b = simulate_closed_loop(&chain3(), |x| recursive_feedback(x, &sched), &[1.0, 1.0, 1.0], &s, &DisturbanceSpec::Zero, 1e-2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rk4_is_fourth_order_on_linear_decay() {
    let sys = linear_decay();
    let err = |step: f64| {
        let s = Schedule { r: 1.0, tau: vec![0.0, 1.0] };
        let tr = simulate_closed_loop(&sys, |_| 0.0, &[1.0], &s, &DisturbanceSpec::Zero, step).unwrap();
        (tr.final_state()[0] - (-1.0f64).exp()).abs()
    };
    for h in [0.1, 0.05, 0.025] {
        let ratio = err(h) / err(h / 2.0);
        assert!(ratio >= 12.0 && ratio < 20.0, "h = {h}: ratio {ratio}");
    }
}
