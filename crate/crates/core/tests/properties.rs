//! Property tests for the structural invariants: feasibility closure,
//! simplex membership of softmin, projection correctness, determinism.

use condgrad::domains::{self, SimplexVector};
use condgrad::fw::{self, SimplexLmo, StepSchedule};
use condgrad::l2lc::random_qp_kernel;
use condgrad::linalg;
use proptest::prelude::*;

fn on_simplex(w: &[f64], tol_sum: f64, tol_neg: f64) -> bool {
    let sum: f64 = w.iter().sum();
    (sum - 1.0).abs() <= tol_sum && w.iter().all(|&x| x >= -tol_neg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmin_lands_on_simplex(
        z in prop::collection::vec(-50.0f64..50.0, 1..20),
        beta in 1e-3f64..1e3,
    ) {
        let s = linalg::softmin(&z, beta).unwrap();
        prop_assert!(on_simplex(s.weights(), 1e-12, 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn projection_lands_on_simplex_and_is_idempotent(
        v in prop::collection::vec(-5.0f64..5.0, 1..12),
    ) {
        let p = linalg::project_simplex(&v).unwrap();
        prop_assert!(on_simplex(p.weights(), 1e-12, 0.0));
        let again = linalg::project_simplex(p.weights()).unwrap();
        for (a, b) in p.weights().iter().zip(again.weights()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn exact_lmo_beats_every_vertex(
        grad in prop::collection::vec(-10.0f64..10.0, 1..10),
    ) {
        let s = domains::simplex_lmo_exact(&grad).unwrap();
        let value = linalg::dot(s.weights(), &grad);
        for &g in &grad {
            prop_assert!(value <= g + 1e-15);
        }
    }

    #[test]
    fn fw_iterates_stay_in_simplex(
        seed in 0u64..10_000,
        soft in proptest::bool::ANY,
        n in 2usize..12,
    ) {
        let k = random_qp_kernel(n, seed);
        let lmo = if soft {
            SimplexLmo::Softmin { beta: 50.0 }
        } else {
            SimplexLmo::Exact
        };
        let problem = fw::simplex_qp_problem(k.matrix().clone(), lmo);
        let run = fw::run_fw(&problem, &StepSchedule::Default, 30, None).unwrap();
        prop_assert!(on_simplex(run.final_point.weights(), 1e-9, 1e-12));
    }
}

#[test]
fn fw_runs_are_bit_deterministic() {
    for seed in 0..5u64 {
        let k = random_qp_kernel(15, seed);
        let run = |_: ()| {
            let problem =
                fw::simplex_qp_problem(k.matrix().clone(), SimplexLmo::Softmin { beta: 25.0 });
            fw::run_fw(&problem, &StepSchedule::Harmonic, 120, None).unwrap()
        };
        let a = run(());
        let b = run(());
        assert!(a.trace.same_numbers(&b.trace));
        assert_eq!(a.final_point.weights(), b.final_point.weights());
        assert_eq!(
            a.trace.to_csv_string(fw::Timing::Zero),
            b.trace.to_csv_string(fw::Timing::Zero)
        );
    }
}

#[test]
fn convex_combination_closure_under_any_gamma_sequence() {
    // arbitrary gamma values in [0, 1] can never push an iterate off the hull
    let mut rng = condgrad::rng::SplitMix64::new(3);
    for _ in 0..200 {
        let n = 2 + rng.next_index(10);
        let mut x = SimplexVector::uniform(n);
        for _ in 0..50 {
            let vertex = SimplexVector::vertex(n, rng.next_index(n));
            let gamma = rng.next_f64();
            x = SimplexVector::new(fw::fw_update(x.weights(), vertex.weights(), gamma)).unwrap();
        }
        assert!(on_simplex(x.weights(), 1e-9, 0.0));
    }
}
