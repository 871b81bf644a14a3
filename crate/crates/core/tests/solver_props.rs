mod common;

use common::{max_abs_diff, random_instance, tensor_sinkhorn};
use pbridge_core::bridge::{
    bca_sweep, dual_objective, dual_objective_at, inner_primal_objective, inner_solve,
    objective_at, primal_objective, proximal_solve, ProximalSolver, shifted_dual_objective, DualState, EtaInit, InnerMode,
    ObservationModel, SolverConfig, SolverError,
};
use pbridge_core::observability::{analyze, controlled_prior, optimal_set_shift};
use pbridge_core::prior::MarkovPrior;
use pbridge_core::sim::{add_noise, propagate, NoiseSpec, Scenario};
use pbridge_core::{NonNegMatrix, NonNegVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exact(residual_tol: f64) -> SolverConfig {
    SolverConfig {
        residual_tol,
        ..SolverConfig::exact()
    }
}

/// Same support as `prior`, entries reweighted at random and renormalized.
fn reweighted(prior: &MarkovPrior, rng: &mut impl Rng) -> MarkovPrior {
    let n = prior.n();
    let steps = prior
        .steps()
        .iter()
        .map(|a| {
            let mut trip: Vec<(usize, usize, f64)> =
                a.triplets().map(|(i, j, v)| (i, j, v * (0.2 + rng.random::<f64>()))).collect();
            let mut sums = vec![0.0; n];
            trip.iter().for_each(|(i, _, v)| sums[*i] += v);
            trip.iter_mut().for_each(|(i, _, v)| *v /= sums[*i]);
            NonNegMatrix::from_triplets(n, n, trip).unwrap()
        })
        .collect();
    MarkovPrior::new(n, steps).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sweeps_ascend_and_hit_readings(seed in any::<u64>(), n in 2..10usize, horizon in 1..7usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=n);
        let inst = random_instance(&mut rng, n, horizon, k);
        let rho = add_noise(&inst.rho, NoiseSpec { sigma: 0.3, seed });
        let mu_hat = inst.obs.embed(rho.at(0), &vec![1.0; n - k]);
        let mut state = DualState::new(&inst.prior, mu_hat).unwrap();
        let mut last = dual_objective(&state, &inst.obs, &rho);
        for _ in 0..30 {
            let stats = match bca_sweep(&mut state, &inst.prior, &inst.obs, &rho) {
                Err(SolverError::DegenerateUpdate { .. }) => return Ok(()),
                other => other.unwrap(),
            };
            prop_assert!(stats.post_update_mismatch <= 1e-12, "{}", stats.post_update_mismatch);
            prop_assert!(stats.dual_objective >= last - 1e-10, "{} < {last}", stats.dual_objective);
            last = stats.dual_objective;
        }
        let ends = dual_objective_at(&state, &inst.obs, &rho, horizon);
        prop_assert!((ends - last).abs() <= 1e-10 * last.abs().max(1.0));
    }

    #[test]
    fn inner_duality_gap_closes(seed in any::<u64>(), n in 2..=10usize, horizon in 1..=6usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=n);
        let inst = random_instance(&mut rng, n, horizon, k);
        let eta: Vec<f64> = (0..n - k).map(|_| 0.1 + 2.0 * rng.random::<f64>()).collect();
        let mu_hat = inst.obs.embed(inst.rho.at(0), &eta);
        let out = inner_solve(&inst.prior, &inst.obs, &inst.rho, &mu_hat, &exact(1e-12)).unwrap();
        let primal = inner_primal_objective(&out.plan, &inst.prior, &mu_hat).unwrap();
        let dual = shifted_dual_objective(&out.state, &inst.prior, &inst.obs, &inst.rho);
        prop_assert!((primal - dual).abs() <= 1e-6, "primal {primal} dual {dual}");
        prop_assert!(out.plan.matching_violation() <= 1e-8);
        prop_assert!(out.plan.supported_by(&inst.prior));
    }

    #[test]
    fn plans_match_mass_and_readings(seed in any::<u64>(), n in 2..=8usize, horizon in 1..=5usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=n);
        let inst = random_instance(&mut rng, n, horizon, k);
        // non-unique instances can drain mass from a state at a sublinear rate,
        // so the check runs on a capped number of exact steps
        let config = SolverConfig::exact();
        let mut solver = ProximalSolver::new(&inst.prior, &inst.obs, &inst.rho, &config).unwrap();
        while !solver.converged() && solver.iterations() < 20_000 {
            solver.step().unwrap();
        }
        let converged = solver.converged();
        let out = solver.finish();
        prop_assert!(out.plan.matching_violation() <= 1e-8);
        prop_assert!(out.plan.observation_violation(&inst.obs, &inst.rho) <= 1e-8);
        if converged {
            prop_assert!(out.objective <= 1e-8, "{}", out.objective);
        }
    }

    #[test]
    fn controlled_rows_are_stochastic_where_mass_sits(
        seed in any::<u64>(),
        n in 2..=8usize,
        horizon in 1..=5usize,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=n);
        let inst = random_instance(&mut rng, n, horizon, k);
        let rho = add_noise(&inst.rho, NoiseSpec { sigma: 0.2, seed });
        let config = SolverConfig {
            outer_tol: 1e-12,
            residual_tol: 1e-11,
            max_outer_iters: 2_000_000,
            ..SolverConfig::default()
        };
        let out = match proximal_solve(&inst.prior, &inst.obs, &rho, &config) {
            Err(SolverError::DegenerateUpdate { .. } | SolverError::Infeasible { .. }) => return Ok(()),
            other => other.unwrap(),
        };
        let cal_a = controlled_prior(&out.state, &inst.prior).unwrap();
        for (t, a) in cal_a.iter().enumerate() {
            let mu = out.plan.marginal(t);
            let sums = a.row_sums();
            for i in 0..n {
                // mass that is still draining towards zero sits off the optimal support
                if mu.as_slice()[i] > 1e-3 {
                    prop_assert!((sums.as_slice()[i] - 1.0).abs() <= 1e-8, "t={t} i={i} {}", sums.as_slice()[i]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn shifts_along_the_kernel_stay_optimal(seed in any::<u64>(), n in 3..=7usize, horizon in 1..=4usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, n, horizon, 1);
        let report = analyze(&inst.prior, &inst.obs, None).unwrap();
        prop_assume!(!report.kernel_basis.is_empty());
        let config = SolverConfig { residual_tol: 1e-12, ..SolverConfig::default() };
        let out = proximal_solve(&inst.prior, &inst.obs, &inst.rho, &config).unwrap();
        let cal_a = controlled_prior(&out.state, &inst.prior).unwrap();
        let base = primal_objective(&out.plan, &inst.prior).unwrap();
        let mu0 = out.plan.marginal(0);
        for q in &report.kernel_basis {
            // largest step keeping the initial marginal nonnegative
            let room = q
                .iter()
                .zip(mu0.iter())
                .filter(|(d, _)| **d < -1e-14)
                .map(|(d, m)| m / -d)
                .fold(f64::INFINITY, f64::min);
            let theta = if room.is_finite() { 0.5 * room } else { 1.0 };
            let z0: Vec<f64> = q.iter().map(|d| theta * d).collect();
            let shifted = optimal_set_shift(&out.plan, &cal_a, &z0, &report.kernel_basis).unwrap();
            prop_assert!(shifted.matching_violation() <= 1e-8);
            prop_assert!(shifted.observation_violation(&inst.obs, &inst.rho) <= 1e-8);
            prop_assert!(shifted.supported_by(&inst.prior));
            let obj = primal_objective(&shifted, &inst.prior).unwrap();
            prop_assert!((obj - base).abs() <= 1e-8, "{obj} vs {base}");
        }
    }
}

#[test]
fn full_observation_matches_path_sinkhorn() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for case in 0..20 {
        let horizon = if case % 2 == 0 { 1 } else { 3 };
        let prior = pbridge_core::sim::random::stochastic_prior(4, horizon, &mut rng).unwrap();
        let truth = reweighted(&prior, &mut rng);
        let mu0 = NonNegVector::new((0..4).map(|_| 0.2 + rng.random::<f64>()).collect()).unwrap();
        let obs = ObservationModel::full(4);
        let scenario = Scenario::new(truth, mu0, obs.clone(), None).unwrap();
        let (_, rho) = propagate(&scenario);
        let mu_hat = rho.at(0).to_vec();
        let out = inner_solve(&prior, &obs, &rho, &mu_hat, &exact(1e-14)).unwrap();
        let reference = tensor_sinkhorn(&prior, &mu_hat, &rho, 20_000);
        let ours: Vec<Vec<Vec<f64>>> = out.plan.steps().iter().map(|m| m.to_dense()).collect();
        let diff = max_abs_diff(&ours.concat(), &reference.concat());
        assert!(diff <= 1e-8, "case {case}: {diff:e}");
    }
}

#[test]
fn unique_instances_forget_the_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let inst = common::observable_network_instance(&mut rng, 14, 10);
        let (prior, obs) = (&inst.scenario.prior, &inst.scenario.obs);
        let solve = |eta_init| {
            let config = SolverConfig {
                outer_tol: 1e-12,
                residual_tol: 1e-12,
                max_outer_iters: 2_000_000,
                eta_init,
                ..SolverConfig::default()
            };
            proximal_solve(prior, obs, &inst.rho, &config).unwrap()
        };
        let a = solve(EtaInit::Uniform);
        let b = solve(EtaInit::Random { seed: 99 });
        for (x, y) in a.plan.steps().iter().zip(b.plan.steps()) {
            assert!(max_abs_diff(&x.to_dense(), &y.to_dense()) <= 1e-6);
        }
        let injected = inst.scenario.injected_total;
        let recovered = a.plan.marginal(0).sum();
        assert!((recovered - injected).abs() <= 1e-6 * injected, "{recovered} vs {injected}");
    }
}

#[test]
fn both_inner_modes_descend() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 10 {
        let n = rng.random_range(3..=8);
        let inst = random_instance(&mut rng, n, 4, 2);
        let rho = add_noise(&inst.rho, NoiseSpec { sigma: 0.1, seed: 3 });
        for inner in [InnerMode::Exact, InnerMode::Sweeps(2)] {
            let config = SolverConfig { inner, ..SolverConfig::default() };
            let Ok(mut solver) = ProximalSolver::new(&inst.prior, &inst.obs, &rho, &config) else {
                break;
            };
            let slack = config.residual_tol;
            let mut last = f64::INFINITY;
            while !solver.converged() && solver.iterations() < 200 {
                // readings the pinned start cannot reach make f infinite
                let f = match objective_at(&inst.prior, &inst.obs, &rho, solver.eta(), &config) {
                    Err(SolverError::DegenerateUpdate { .. } | SolverError::InvalidInput(_)) => f64::INFINITY,
                    other => other.unwrap(),
                };
                assert!(f == f64::INFINITY && last == f64::INFINITY || f <= last + slack, "{inner:?} iter {}: {f} > {last}", solver.iterations());
                last = f;
                if solver.step().is_err() {
                    break;
                }
            }
            checked += usize::from(inner == InnerMode::Exact);
        }
    }
}
