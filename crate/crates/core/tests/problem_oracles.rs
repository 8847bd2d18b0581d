use meshopt::problem::{
    build_factored_ls, build_target_tracking, simulate_target_data, FactoredLeastSquaresSpec, SeparableProblem,
    TargetTrackingSpec, Weighting,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_point(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0))
}

fn tracking(n_robots: usize, n_steps: usize, seed: u64) -> (TargetTrackingSpec, SeparableProblem) {
    let spec = simulate_target_data(&TargetTrackingSpec::constant_velocity(n_robots, n_steps, seed)).unwrap();
    let problem = build_target_tracking(&spec).unwrap();
    (spec, problem)
}

/// Stacks `√M_i G_i` and `√M_i z_i` and solves by Householder QR.
fn qr_solution(spec: &FactoredLeastSquaresSpec) -> DVector<f64> {
    let total: usize = spec.rows().iter().sum();
    let mut a = DMatrix::zeros(total, spec.n);
    let mut b = DVector::zeros(total);
    let mut row = 0;
    for i in 0..spec.n_robots {
        let Weighting::Diag(w) = &spec.weights[i] else {
            panic!("random instances use diagonal weights");
        };
        for (k, g) in spec.factors[i].iter().enumerate() {
            let s = w[k].sqrt();
            for (c, v) in g.iter().enumerate() {
                a[(row, c)] = s * v;
            }
            b[row] = s * spec.targets[i][k];
            row += 1;
        }
    }
    let qr = a.qr();
    let rhs = qr.q().transpose() * b;
    qr.r().solve_upper_triangular(&rhs).unwrap()
}

#[test]
fn factored_oracle_matches_qr_least_squares() {
    for (rows, n, seed) in [
        (vec![10, 12, 9], 8, 1),
        (vec![64; 10], 32, 2),
        (vec![3268, 5422, 3528], 32, 7),
    ] {
        let spec = FactoredLeastSquaresSpec::random(&rows, n, 0.1, seed);
        let oracle = build_factored_ls(&spec).unwrap().oracle_solve().unwrap();
        let qr = qr_solution(&spec);
        let err = (&oracle - &qr).norm() / qr.norm();
        assert!(err < 1e-8, "relative error {err} for n = {n}");
    }
}

#[test]
fn oracle_matches_dense_normal_equations() {
    let problem = build_factored_ls(&FactoredLeastSquaresSpec::random(&[20, 20, 20, 20], 8, 0.3, 11)).unwrap();
    let p: DMatrix<f64> = problem
        .costs()
        .iter()
        .map(|c| c.p.clone())
        .fold(DMatrix::zeros(8, 8), |a, b| a + b);
    let r: DVector<f64> = problem
        .costs()
        .iter()
        .map(|c| c.r.clone())
        .fold(DVector::zeros(8), |a, b| a + b);
    let direct = p.lu().solve(&(-r)).unwrap();
    let oracle = problem.oracle_solve().unwrap();
    assert!((&oracle - &direct).norm() <= 1e-8 * direct.norm().max(1.0));
}

#[test]
fn gradients_sum_to_zero_at_the_oracle() {
    let (_, problem) = tracking(10, 16, 0);
    let x = problem.oracle_solve().unwrap();
    let total = (0..problem.n_robots())
        .map(|i| problem.gradient(i, &x))
        .fold(DVector::zeros(problem.dim()), |a, b| a + b);
    let scale: f64 = (0..problem.n_robots()).map(|i| problem.gradient(i, &x).norm()).sum();
    assert!(total.norm() <= 1e-8 * scale.max(1.0), "{}", total.norm());
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let instances = [
        tracking(4, 6, 3).1,
        build_factored_ls(&FactoredLeastSquaresSpec::random(&[12, 15], 6, 0.1, 4)).unwrap(),
    ];
    let h = 1e-5;
    for problem in &instances {
        for _ in 0..5 {
            let x = random_point(problem.dim(), &mut rng);
            for i in 0..problem.n_robots() {
                let analytic = problem.gradient(i, &x);
                let numeric = DVector::from_fn(problem.dim(), |d, _| {
                    let mut up = x.clone();
                    let mut down = x.clone();
                    up[d] += h;
                    down[d] -= h;
                    (problem.local_cost(i, &up) - problem.local_cost(i, &down)) / (2.0 * h)
                });
                let rel = (&numeric - &analytic).norm() / analytic.norm().max(1.0);
                assert!(rel <= 1e-6, "robot {i}: relative error {rel}");
            }
        }
    }
}

#[test]
fn local_costs_sum_to_the_joint_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (spec, problem) = tracking(5, 8, 2);
    for _ in 0..10 {
        let x = random_point(problem.dim(), &mut rng);
        let local: f64 = (0..problem.n_robots()).map(|i| problem.local_cost(i, &x)).sum();
        let joint = spec.global_cost(&x).unwrap();
        assert!(
            (local - joint).abs() <= 1e-9 * (1.0 + joint.abs()),
            "{local} vs {joint}"
        );
        assert!((problem.joint_cost(&x) - joint).abs() <= 1e-9 * (1.0 + joint.abs()));
    }
}

#[test]
fn doubling_information_doubles_the_quadratic_part() {
    let (spec, problem) = tracking(4, 6, 8);
    let halve =
        |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { m.iter().map(|r| r.iter().map(|v| v / 2.0).collect()).collect() };
    let mut doubled = spec.clone();
    doubled.process_noise = spec.process_noise.iter().map(halve).collect();
    doubled.measurement_noise = spec
        .measurement_noise
        .iter()
        .map(|per| per.iter().map(halve).collect())
        .collect();
    doubled.prior_covariance = halve(&spec.prior_covariance);
    let twice = build_target_tracking(&doubled).unwrap();
    let c0: f64 = problem.costs().iter().map(|c| c.c).sum();
    let c1: f64 = twice.costs().iter().map(|c| c.c).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let x = random_point(problem.dim(), &mut rng);
        let base = problem.joint_cost(&x) - c0;
        let scaled = twice.joint_cost(&x) - c1;
        assert!(
            (scaled - 2.0 * base).abs() <= 1e-10 * base.abs().max(1.0),
            "{scaled} vs 2 x {base}"
        );
    }
    assert!((c1 - 2.0 * c0).abs() <= 1e-10 * c0.abs().max(1.0));
}

#[test]
fn prior_only_oracle_is_the_prior_rollout() {
    let mut spec = TargetTrackingSpec::constant_velocity(2, 5, 0);
    spec.visible_steps = vec![vec![], vec![]];
    spec.measurements = Some(vec![vec![], vec![]]);
    let x = build_target_tracking(&spec).unwrap().oracle_solve().unwrap();
    let mut state = DVector::from_column_slice(&spec.prior_mean);
    for t in 0..spec.n_steps {
        let block = x.rows(4 * t, 4);
        assert!((block - &state).norm() < 1e-9, "step {t}");
        if t + 1 < spec.n_steps {
            let a = DMatrix::from_fn(4, 4, |r, c| spec.dynamics[t][r][c]);
            state = a * state;
        }
    }
}

#[test]
fn tracking_documents_round_trip_bit_exactly() {
    let (spec, problem) = tracking(3, 5, 4);
    let text = serde_json::to_string(&spec).unwrap();
    let back: TargetTrackingSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
    assert_eq!(
        build_target_tracking(&back).unwrap().fingerprint(),
        problem.fingerprint()
    );
}
