mod common;

use common::{gauss_rank, random_instance};
use pbridge_core::bridge::{ProximalSolver, SolverConfig};
use pbridge_core::observability::{
    analyze, controlled_prior, downstream_sets, kernel_and_rank, max_principal_angle,
    observability_matrix, observability_matrix_of, zero_columns,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_rows(o: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    o.row_iter().map(|r| r.iter().copied().collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn downstream_sets_are_forward_invariant(seed in any::<u64>(), n in 2..=10usize, horizon in 0..=6usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(0..=n);
        let inst = random_instance(&mut rng, n, horizon, k);
        let sets = downstream_sets(&inst.prior, &inst.obs);
        for (t, a) in inst.prior.steps().iter().enumerate() {
            for (i, j, _) in a.triplets() {
                prop_assert!(!sets[t][i] || sets[t + 1][j], "t={t} {i}->{j}");
            }
        }
        let o = observability_matrix(&inst.prior, &inst.obs);
        let members: Vec<usize> = (0..n).filter(|&i| sets[0][i]).collect();
        prop_assert_eq!(&members, &zero_columns(&o));
        let report = analyze(&inst.prior, &inst.obs, None).unwrap();
        prop_assert_eq!(report.unobservable_downstream_set, members);
    }

    #[test]
    fn report_is_consistent(seed in any::<u64>(), n in 2..=8usize, horizon in 0..=5usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=n);
        let inst = random_instance(&mut rng, n, horizon, k);
        let report = analyze(&inst.prior, &inst.obs, None).unwrap();
        prop_assert_eq!(report.rank + report.kernel_basis.len(), n);
        prop_assert_eq!(report.is_unique, report.kernel_basis.is_empty());
        let o = observability_matrix(&inst.prior, &inst.obs);
        for q in &report.kernel_basis {
            let norm: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-12);
            let image = &o * nalgebra::DVector::from_column_slice(q);
            prop_assert!(image.amax() <= 1e-9);
        }
        for i in &report.unobservable_downstream_set {
            prop_assert!(o.column(*i).iter().all(|v| *v == 0.0));
        }
        // the rank agrees with elimination whenever the spectrum has a clear gap
        let sv = o.singular_values();
        let top = sv.max();
        if sv.iter().all(|s| *s > 1e-6 * top || *s < 1e-13 * top) {
            prop_assert_eq!(gauss_rank(to_rows(&o), 1e-9 * top.max(1e-300)), report.rank);
        }
    }
}

#[test]
fn full_rank_stacks_have_no_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let o = nalgebra::DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let (rank, kernel) = kernel_and_rank(&o, None);
        assert_eq!(gauss_rank(to_rows(&o), 1e-12), 5);
        assert_eq!((rank, kernel.len()), (5, 0));
    }
}

#[test]
fn controlled_prior_has_the_same_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xabc);
    let mut worst: f64 = 0.0;
    let mut nontrivial = 0;
    for case in 0..100 {
        let n = rng.random_range(2..=8);
        let horizon = rng.random_range(1..=5);
        let k = rng.random_range(1..=n);
        let inst = random_instance(&mut rng, n, horizon, k);
        let config = SolverConfig {
            residual_tol: 1e-10,
            ..SolverConfig::exact()
        };
        let mut solver = ProximalSolver::new(&inst.prior, &inst.obs, &inst.rho, &config).unwrap();
        while !solver.converged() && solver.iterations() < 200 {
            solver.step().unwrap();
        }
        let out = solver.finish();
        assert!(out.residual <= 1e-10 * inst.rho.max_entry().max(1.0));
        let cal_a = controlled_prior(&out.state, &inst.prior).unwrap();
        let (_, ker_a) = kernel_and_rank(&observability_matrix(&inst.prior, &inst.obs), None);
        let (_, ker_c) = kernel_and_rank(&observability_matrix_of(&cal_a, &inst.obs), None);
        let angle = max_principal_angle(&ker_a, &ker_c);
        assert!(angle <= 1e-6, "case {case}: angle {angle:e}");
        worst = worst.max(angle);
        nontrivial += usize::from(!ker_a.is_empty());
    }
    println!("largest principal angle {worst:e} over {nontrivial} nontrivial kernels");
    assert!(nontrivial >= 20);
}
