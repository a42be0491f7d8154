//! Barrier-tightened constraints and controller behaviour around obstacles.

use knav_core::mpc::{cbf_tighten, clearance_rows, min_clearance, ClearanceTerm, MpcConfig, MpcController, MpcProblem, SolveStatus};
use knav_core::sysid::{DynamicsModel, IntegratorModel, LinearDynamics};
use knav_core::{BodyCircle, ConvexPolytope, Point2, Pose2, State};
use proptest::prelude::*;

fn integrator() -> LinearDynamics {
    DynamicsModel::Integrator(IntegratorModel { dt: 0.02 }).to_linear()
}

/// States whose linearized clearances equal `h` exactly, solved along the
/// x-component of the gradient.
fn states_with_clearances(terms: &[ClearanceTerm], h: &[f64], py: f64, theta: f64) -> Vec<State> {
    terms
        .iter()
        .zip(h)
        .map(|(t, hk)| {
            let [gx, gy, gt] = t.gradient;
            State {
                px: (hk - t.offset - gy * py - gt * theta) / gx,
                py,
                theta,
                ..State::default()
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Any trajectory satisfying the barrier rows satisfies the plain rows:
    /// tightening never admits a clearance the plain constraints reject.
    #[test]
    fn barrier_rows_imply_plain_rows(
        gamma in 0.0f64..0.99,
        initial in 0.0f64..2.0,
        gx in prop_oneof![0.2f64..1.0, -1.0f64..-0.2],
        gy in -1.0f64..1.0,
        gt in -0.3f64..0.3,
        offsets in prop::collection::vec(-1.0f64..1.0, 1..10),
        increments in prop::collection::vec(0.0f64..0.3, 10),
        py in -1.0f64..1.0,
        theta in -3.0f64..3.0,
    ) {
        let terms: Vec<ClearanceTerm> = offsets
            .iter()
            .enumerate()
            .map(|(i, offset)| ClearanceTerm {
                obstacle: 0,
                circle: 0,
                step: i + 1,
                offset: *offset,
                gradient: [gx, gy, gt],
                initial,
            })
            .collect();
        let mut h = Vec::with_capacity(terms.len());
        let mut prev = initial;
        for inc in increments.iter().take(terms.len()) {
            prev = gamma * prev + inc;
            h.push(prev);
        }
        let states = states_with_clearances(&terms, &h, py, theta);
        let barrier = cbf_tighten(&terms, gamma).unwrap();
        let plain = clearance_rows(&terms);
        for row in &barrier {
            prop_assert!(row.lhs(&states, &[]) >= row.rhs - 1e-9);
        }
        for row in &plain {
            prop_assert!(row.lhs(&states, &[]) >= row.rhs - 1e-9);
        }
    }

    /// Undercutting the geometric envelope `γ^k ĥ_0` at any step violates
    /// some barrier row.
    #[test]
    fn barrier_rows_enforce_geometric_envelope(
        gamma in 0.05f64..0.95,
        initial in 0.1f64..2.0,
        len in 1usize..8,
        cut in 0usize..8,
    ) {
        let cut = cut % len;
        let terms: Vec<ClearanceTerm> = (1..=len)
            .map(|k| ClearanceTerm { obstacle: 0, circle: 0, step: k, offset: 0.0, gradient: [1.0, 0.0, 0.0], initial })
            .collect();
        let mut h: Vec<f64> = (1..=len).map(|k| initial * gamma.powi(k as i32)).collect();
        h[cut] -= 1e-6;
        let states = states_with_clearances(&terms, &h, 0.0, 0.0);
        let barrier = cbf_tighten(&terms, gamma).unwrap();
        prop_assert!(barrier.iter().any(|r| r.lhs(&states, &[]) < r.rhs));
    }
}

fn approach_problem(model: &LinearDynamics, block: &ConvexPolytope) -> MpcProblem {
    // The reference creeps up to x = 0.4, where the front circle would
    // overlap a wall whose face is at x = 0.75.
    let poses: Vec<Pose2> = (0..=50).map(|k| Pose2::new(0.008 * k as f64, 0.0, 0.0)).collect();
    MpcProblem::from_world(
        model,
        &[State::default()],
        &poses,
        std::slice::from_ref(block),
        &BodyCircle::default_body(),
        0.02,
        None,
    )
    .unwrap()
}

fn wall() -> ConvexPolytope {
    ConvexPolytope::rectangle(Point2::new(0.75, -1.0), Point2::new(0.95, 1.0)).unwrap()
}

/// Clearance of the front body circle, the one facing the wall.
fn front_clearance(block: &ConvexPolytope, state: &State) -> f64 {
    let front = BodyCircle::default_body().into_iter().last().unwrap();
    let pose = state.pose();
    let center = pose.point_to_world(&Point2::new(front.offset_x, 0.0));
    block.signed_distance(&center).distance - front.radius
}

#[test]
fn controller_stops_short_of_the_wall_and_is_deterministic() {
    let model = integrator();
    let block = wall();
    let problem = approach_problem(&model, &block);
    let reference_clearance = min_clearance(&problem.obstacles, &problem.circles, &problem.reference);
    assert!(reference_clearance < -0.05, "the reference must overlap the wall");
    for gamma in [None, Some(0.3), Some(0.6), Some(0.9)] {
        let config = MpcConfig {
            gamma,
            ..MpcConfig::default()
        };
        let controller = MpcController::new(model.clone(), config).unwrap();
        let a = controller.solve(&problem).unwrap();
        let b = controller.solve(&problem).unwrap();
        assert_eq!(a.commands, b.commands, "solves must be reproducible");
        assert_eq!(a.status, SolveStatus::Optimal, "gamma {gamma:?}");
        let clearance = min_clearance(&problem.obstacles, &problem.circles, &a.predicted);
        assert!(clearance >= -1e-6, "gamma {gamma:?}: predicted clearance {clearance}");
        assert!(a.kkt_residual <= 1e-6, "gamma {gamma:?}: kkt {}", a.kkt_residual);
    }
}

#[test]
fn barrier_bounds_the_decay_of_clearance() {
    let model = integrator();
    let block = wall();
    let problem = approach_problem(&model, &block);
    let margin = MpcConfig::default().safety_margin;
    let h0 = front_clearance(&block, &problem.current) - margin;
    let mut previous = f64::NEG_INFINITY;
    for gamma in [0.0, 0.3, 0.6, 0.9] {
        let controller = MpcController::new(
            model.clone(),
            MpcConfig {
                gamma: Some(gamma),
                ..MpcConfig::default()
            },
        )
        .unwrap();
        let sol = controller.solve(&problem).unwrap();
        let mut bound = h0;
        for (k, state) in sol.predicted.iter().enumerate() {
            bound *= gamma;
            let h = front_clearance(&block, state) - margin;
            assert!(h >= bound - 1e-6, "gamma {gamma}: step {} clearance {h} below {bound}", k + 1);
        }
        // Larger rates keep the robot further back at the end of the horizon.
        let last = front_clearance(&block, sol.predicted.last().unwrap());
        assert!(last >= previous - 1e-6, "gamma {gamma}: {last} < {previous}");
        previous = last;
    }
}
