use sdfwd::controller::{bound_check, recursive_feedback};
use sdfwd::design::{
    certify_coupling_bound, certify_lyapunov_decay, certify_shell_decrease, synthesize, GainSchedule,
    GridSpec, NonlinearityBound, StageChoice,
};
use sdfwd::linalg::{Matrix, Vector};
use sdfwd::design::StageMaps;
use sdfwd::system::{chain3, DisturbanceBox};

fn chain3_choices() -> Vec<StageChoice> {
    vec![
        StageChoice {
            p_matrix: Matrix::identity(1),
            p: Vector::new(vec![-1.0]),
            omega: 1.0,
            r_requested: 1.0,
        },
        StageChoice {
            p_matrix: Matrix::from_rows(&[[1.0, 1.0], [1.0, 2.0]]).unwrap(),
            p: Vector::new(vec![-2.0, -2.0]),
            omega: 1.0,
            r_requested: 1.0,
        },
    ]
}

#[test]
fn synthesized_chain_law_is_certified() {
    let (sched, consts) = synthesize(3, &NonlinearityBound::constant(1.0), &chain3_choices(), 1.0, 1.0).unwrap();
    assert_eq!(consts.len(), 2);
    let sys = chain3();
    for st in sched.stages() {
        let maps = StageMaps::from_chain(&sys, st.index()).unwrap();
        for f in [certify_shell_decrease, certify_coupling_bound, certify_lyapunov_decay] {
            let cert = f(&maps, &DisturbanceBox::empty(), st, &GridSpec::default()).unwrap();
            assert!(cert.pass, "stage {}: {cert:?}", st.index());
        }
    }
    let bc = bound_check(&sched, 1.0).unwrap();
    assert!(bc.bound.is_finite());
}

#[test]
fn gain_schedule_json_round_trip_preserves_law() {
    let (sched, _) = synthesize(3, &NonlinearityBound::constant(1.0), &chain3_choices(), 1.0, 1.0).unwrap();
    let text = serde_json::to_string_pretty(&sched).unwrap();
    let back: GainSchedule = serde_json::from_str(&text).unwrap();
    assert_eq!(back, sched);
    for x in [[0.01, -0.02, 0.3], [1.0, 1.0, 1.0], [-0.001, 0.002, -0.004]] {
        assert_eq!(recursive_feedback(&x, &back).to_bits(), recursive_feedback(&x, &sched).to_bits());
    }
}
