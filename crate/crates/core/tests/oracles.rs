//! Oracle-equivalence tests: every optimizer path is checked against an
//! independent reference (Jacobi eigensolver, projected gradient descent,
//! closed forms) rather than against itself.

use condgrad::baselines::{self, AdamParams};
use condgrad::domains;
use condgrad::fw::{self, SimplexLmo, StepSchedule};
use condgrad::l2lc::random_qp_kernel;
use condgrad::linalg::{self, Matrix};
use condgrad::rng::SplitMix64;
use condgrad::svm::{self, KernelMatrix, KernelSpec, LabeledDataset};
use condgrad_testkit as testkit;

/// Projected gradient descent run until the exact FW gap certifies `tol`.
fn pgd_to_gap(k: &KernelMatrix, tol: f64, max_iters: usize) -> (Vec<f64>, f64) {
    let sigma = linalg::power_iteration(k.matrix(), 100, 7)
        .expect("nonzero kernel")
        .sigma_est;
    let step = 1.0 / sigma.max(1e-12);
    let mut alpha = vec![1.0 / k.n() as f64; k.n()];
    for _ in 0..max_iters {
        let grad = k.matvec(&alpha);
        let s = domains::simplex_lmo_exact(&grad).unwrap();
        let gap = fw::duality_gap(&alpha, &grad, s.weights()).unwrap();
        if gap < tol {
            break;
        }
        let moved: Vec<f64> = alpha
            .iter()
            .zip(&grad)
            .map(|(a, g)| a - step * g)
            .collect();
        alpha = linalg::project_simplex(&moved).unwrap().into_vec();
    }
    let value = 0.5 * linalg::dot(&alpha, &k.matvec(&alpha));
    (alpha, value)
}

#[test]
fn power_iteration_agrees_with_jacobi_oracle() {
    let mut rng = SplitMix64::new(40);
    for trial in 0..40 {
        let rows = 3 + rng.next_index(10); // up to 12
        let cols = 2 + rng.next_index(7); // up to 8
        let a = testkit::matrix_with_spectral_gap(rows, cols, 2.0, 1.6, 500 + trial);
        let pair = linalg::power_iteration(&a, 50, trial).unwrap();
        let (u_star, v_star, sigma_star) = testkit::top_singular_pair(&a);
        assert!(
            testkit::abs_cosine(&pair.u, &u_star) >= 0.999,
            "u misaligned on trial {trial}"
        );
        assert!(
            testkit::abs_cosine(&pair.v, &v_star) >= 0.999,
            "v misaligned on trial {trial}"
        );
        assert!((pair.sigma_est - sigma_star).abs() / sigma_star < 1e-3);
    }
}

#[test]
fn tracenorm_lmo_value_matches_top_singular_value() {
    let mut rng = SplitMix64::new(41);
    for trial in 0..30 {
        let data: Vec<f64> = (0..40).map(|_| rng.next_gaussian()).collect();
        let grad = Matrix::new(8, 5, data).unwrap();
        let atom = domains::tracenorm_lmo(&grad, 1.0, 50, 900 + trial).unwrap();
        let sv = testkit::singular_values(&grad);
        let got = atom.inner_with(&grad);
        // <s, grad> = -tau sigma_1 for the exact oracle
        assert!(
            (got + sv[0]).abs() / sv[0] <= 1e-3,
            "trial {trial}: {got} vs {}",
            -sv[0]
        );
    }
}

#[test]
fn built_kernels_are_psd_up_to_slack() {
    let mut rng = SplitMix64::new(42);
    for trial in 0..10 {
        let n = 10;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian()])
            .collect();
        let labels: Vec<f64> = (0..n)
            .map(|_| if rng.next_f64() < 0.5 { -1.0 } else { 1.0 })
            .collect();
        let data = LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
        let spec = if trial % 2 == 0 {
            KernelSpec::Linear
        } else {
            KernelSpec::Rbf { bandwidth: 0.8 }
        };
        let k = build_symmetric(&data, spec);
        assert!(
            testkit::min_eigenvalue(&k) >= -1e-9,
            "kernel not PSD on trial {trial}"
        );
    }
}

fn build_symmetric(data: &LabeledDataset, spec: KernelSpec) -> Matrix {
    let k = svm::build_kernel(data, spec, 1.0).unwrap();
    // symmetry is structural; hand the raw matrix to the eigensolver
    let m = k.matrix().clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            assert_eq!(m.get(i, j), m.get(j, i));
        }
    }
    m
}

#[test]
fn exact_fw_matches_projected_gradient_on_qps() {
    for seed in 0..5u64 {
        let k = random_qp_kernel(20, seed);
        let problem = fw::simplex_qp_problem(k.matrix().clone(), SimplexLmo::Exact);
        let run = fw::run_fw(&problem, &StepSchedule::Default, 2000, None).unwrap();
        let (_, oracle_value) = pgd_to_gap(&k, 1e-8, 200_000);
        assert!(
            (run.final_objective - oracle_value).abs() <= 1e-3,
            "seed {seed}: fw {} vs pgd {}",
            run.final_objective,
            oracle_value
        );
    }
}

#[test]
fn duality_gap_upper_bounds_suboptimality() {
    for seed in 10..15u64 {
        let k = random_qp_kernel(15, seed);
        let (_, f_star) = pgd_to_gap(&k, 1e-10, 400_000);
        let problem = fw::simplex_qp_problem(k.matrix().clone(), SimplexLmo::Exact);
        let run = fw::run_fw(&problem, &StepSchedule::Default, 300, None).unwrap();
        for r in &run.trace.records {
            assert!(
                r.duality_gap >= r.objective - f_star - 1e-9,
                "seed {seed} iter {}: gap {} below suboptimality {}",
                r.iter,
                r.duality_gap,
                r.objective - f_star
            );
        }
    }
}

#[test]
fn softmin_fw_tracks_exact_fw_at_high_beta() {
    for seed in 20..25u64 {
        let k = random_qp_kernel(20, seed);
        let soft = fw::run_fw(
            &fw::simplex_qp_problem(k.matrix().clone(), SimplexLmo::Softmin { beta: 1e4 }),
            &StepSchedule::Default,
            500,
            None,
        )
        .unwrap();
        let exact = fw::run_fw(
            &fw::simplex_qp_problem(k.matrix().clone(), SimplexLmo::Exact),
            &StepSchedule::Default,
            500,
            None,
        )
        .unwrap();
        assert!(
            (soft.final_objective - exact.final_objective).abs() <= 1e-3,
            "seed {seed}: softmin {} vs exact {}",
            soft.final_objective,
            exact.final_objective
        );
    }
}

#[test]
fn dual_objective_descends_up_to_curvature() {
    // Open-loop gamma_t = 2/(t+2) is not monotone step by step (gamma_0 = 1
    // jumps to a vertex), but the descent lemma bounds every increase by the
    // curvature term: f(x_{t+1}) - f(x_t) <= gamma_t^2 sigma_1(K) on the
    // simplex. Net descent from x_1 must still hold.
    for seed in 0..20u64 {
        let k = random_qp_kernel(12, 100 + seed);
        let sigma1 = linalg::power_iteration(k.matrix(), 100, 1)
            .unwrap()
            .sigma_est;
        let problem = fw::simplex_qp_problem(k.matrix().clone(), SimplexLmo::Exact);
        let run = fw::run_fw(&problem, &StepSchedule::Default, 400, None).unwrap();
        let objectives: Vec<f64> = run
            .trace
            .records
            .iter()
            .map(|r| r.objective)
            .chain(std::iter::once(run.final_objective))
            .collect();
        for (t, w) in objectives.windows(2).enumerate() {
            let gamma = 2.0 / (t as f64 + 2.0);
            assert!(
                w[1] - w[0] <= gamma * gamma * sigma1 + 1e-10,
                "seed {seed} t={t}: increase {} above curvature bound {}",
                w[1] - w[0],
                gamma * gamma * sigma1
            );
        }
        assert!(
            run.final_objective < objectives[1],
            "seed {seed}: no net descent from the first vertex"
        );
        assert!(
            run.final_objective <= objectives[0] + 1e-3,
            "seed {seed}: finished above the uniform start"
        );
    }
}

#[test]
fn gap_decays_like_one_over_t() {
    // min-gap over the first 2000 iterations at most a fifth of the min-gap
    // over the first 200, on seeded QPs
    for seed in 0..20u64 {
        let k = random_qp_kernel(50, 200 + seed);
        let problem = fw::simplex_qp_problem(k.matrix().clone(), SimplexLmo::Exact);
        let run = fw::run_fw(&problem, &StepSchedule::Default, 2000, None).unwrap();
        let min_gap = |upto: usize| {
            run.trace.records[..upto]
                .iter()
                .map(|r| r.duality_gap)
                .fold(f64::INFINITY, f64::min)
        };
        let early = min_gap(200);
        let late = min_gap(2000);
        assert!(
            late <= early / 5.0,
            "seed {seed}: min-gap(2000) = {late} vs min-gap(200) = {early}"
        );
    }
}

#[test]
fn baseline_triangle_agrees_on_strongly_convex_qps() {
    for seed in 30..33u64 {
        // strong convexity via a diagonal shift
        let base = random_qp_kernel(12, seed);
        let mut m = base.matrix().clone();
        for i in 0..m.rows() {
            m.set(i, i, m.get(i, i) + 0.5);
        }
        let k = KernelMatrix::from_matrix(m).unwrap();

        let (_, pgd_value) = pgd_to_gap(&k, 1e-10, 400_000);
        let (reparam_alpha, _) =
            baselines::reparam_simplex_train(&k, 6000, AdamParams::with_step(0.01)).unwrap();
        let reparam_value =
            0.5 * linalg::dot(reparam_alpha.weights(), &k.matvec(reparam_alpha.weights()));
        let (lagr_alpha, _) =
            baselines::lagrangian_adam_train(&k, 1.0 / 12.0, 20000, AdamParams::with_step(0.01))
                .unwrap();
        // the Lagrangian iterate lives off the simplex; compare after
        // normalizing, which maps its KKT point onto the dual optimum
        let total: f64 = lagr_alpha.iter().sum();
        let normalized: Vec<f64> = lagr_alpha.iter().map(|a| a / total).collect();
        let lagr_value = 0.5 * linalg::dot(&normalized, &k.matvec(&normalized));

        assert!(
            (reparam_value - pgd_value).abs() <= 1e-3,
            "seed {seed}: reparam {reparam_value} vs pgd {pgd_value}"
        );
        assert!(
            (lagr_value - pgd_value).abs() <= 1e-3,
            "seed {seed}: lagrangian {lagr_value} vs pgd {pgd_value}"
        );
    }
}

#[test]
fn reparam_adam_close_to_exact_fw() {
    let k = random_qp_kernel(20, 77);
    let (alpha, _) = baselines::reparam_simplex_train(&k, 2000, AdamParams::with_step(0.01)).unwrap();
    let reparam_value = 0.5 * linalg::dot(alpha.weights(), &k.matvec(alpha.weights()));
    let run = fw::run_fw(
        &fw::simplex_qp_problem(k.matrix().clone(), SimplexLmo::Exact),
        &StepSchedule::Default,
        2000,
        None,
    )
    .unwrap();
    let rel = (reparam_value - run.final_objective).abs() / run.final_objective.abs().max(1e-12);
    assert!(rel <= 0.05, "relative disagreement {rel}");
}

#[test]
fn fw_svm_step_converges_to_exact_run() {
    // 500 softmin steps at beta = 1e4 land within 1e-3 of the exact-LMO run
    let k = random_qp_kernel(20, 55);
    let mut alpha = condgrad::domains::SimplexVector::uniform(20);
    let schedule = StepSchedule::Default;
    let mut state = schedule.start();
    for t in 0..500 {
        let gamma = schedule.step_size(t, &mut state);
        alpha = svm::fw_svm_step(&alpha, &k, gamma, 1e4).unwrap();
    }
    let soft_value = 0.5 * linalg::dot(alpha.weights(), &k.matvec(alpha.weights()));
    let exact = fw::run_fw(
        &fw::simplex_qp_problem(k.matrix().clone(), SimplexLmo::Exact),
        &StepSchedule::Default,
        500,
        None,
    )
    .unwrap();
    assert!(
        (soft_value - exact.final_objective).abs() <= 1e-3,
        "softmin steps {soft_value} vs exact run {}",
        exact.final_objective
    );
}

#[test]
fn larger_power_iteration_budget_never_hurts_much() {
    use condgrad::datasets;
    use condgrad::softmax;
    let (data, _) = datasets::generate_low_rank(120, 8, 3, 2, 0.0, 9).unwrap();
    let mut finals = Vec::new();
    for k_iters in [1usize, 5, 20] {
        let (model, _) = softmax::train_softmax_fw(
            &data,
            5.0,
            k_iters,
            &StepSchedule::Constant(0.05),
            300,
            13,
        )
        .unwrap();
        finals.push(softmax::softmax_objective(model.weights.dense(), &data).unwrap());
    }
    assert!(finals[1] <= finals[0] + 1e-3, "k=5 worse than k=1: {finals:?}");
    assert!(finals[2] <= finals[1] + 1e-3, "k=20 worse than k=5: {finals:?}");
}
