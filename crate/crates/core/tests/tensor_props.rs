use pbridge_core::tensor::{kl_divergence, NonNegMatrix, NonNegVector};
use proptest::prelude::*;

fn vec_pair(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    // zeros in p are allowed anywhere; q is positive so the pair is admissible
    (
        prop::collection::vec(prop_oneof![Just(0.0), 0.0..10.0f64], len),
        prop::collection::vec(1e-6..10.0f64, len),
    )
}

fn nn(v: &[f64]) -> NonNegVector {
    NonNegVector::new(v.to_vec()).unwrap()
}

fn mix(a: &[f64], b: &[f64], theta: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| theta * x + (1.0 - theta) * y).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn kl_is_nonnegative((p, q) in (1usize..8).prop_flat_map(vec_pair)) {
        let d = kl_divergence(&nn(&p), &nn(&q)).unwrap();
        prop_assert!(d >= -1e-12, "D = {d}");
    }

    #[test]
    fn kl_vanishes_only_on_equal_inputs((p, q) in (1usize..8).prop_flat_map(vec_pair)) {
        prop_assert!(kl_divergence(&nn(&q), &nn(&q)).unwrap().abs() <= 1e-12);
        let d = kl_divergence(&nn(&p), &nn(&q)).unwrap();
        let gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > 1e-3 {
            prop_assert!(d > 1e-12, "D = {d} for inputs {gap} apart");
        }
    }

    #[test]
    fn kl_is_jointly_convex(
        ((p1, q1), (p2, q2)) in (1usize..8).prop_flat_map(|n| (vec_pair(n), vec_pair(n))),
        theta in 0.0..=1.0f64,
    ) {
        let lhs = kl_divergence(&nn(&mix(&p1, &p2, theta)), &nn(&mix(&q1, &q2, theta))).unwrap();
        let rhs = theta * kl_divergence(&nn(&p1), &nn(&q1)).unwrap()
            + (1.0 - theta) * kl_divergence(&nn(&p2), &nn(&q2)).unwrap();
        prop_assert!(lhs <= rhs + 1e-10, "{lhs} > {rhs}");
    }
}

proptest! {
    #[test]
    fn transpose_row_sums_are_column_sums(
        dense in (1usize..7, 1usize..7).prop_flat_map(|(r, c)| {
            prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0), 0.0..5.0f64], c), r)
        })
    ) {
        let m = NonNegMatrix::from_dense(&dense).unwrap();
        let by_hand: Vec<f64> = (0..dense[0].len())
            .map(|j| dense.iter().map(|row| row[j]).sum())
            .collect();
        let got = m.transpose().row_sums();
        for (a, b) in got.iter().zip(&by_hand) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert_eq!(m.col_sums(), got);
    }

    #[test]
    fn matrix_kl_matches_entrywise_sum(
        (p, q) in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| vec_pair(r * c).prop_map(move |v| (v, c)))
            .prop_map(|((p, q), c)| {
                let split = |v: Vec<f64>| v.chunks(c).map(<[f64]>::to_vec).collect::<Vec<_>>();
                (split(p), split(q))
            })
    ) {
        let dm = kl_divergence(
            &NonNegMatrix::from_dense(&p).unwrap(),
            &NonNegMatrix::from_dense(&q).unwrap(),
        )
        .unwrap();
        let flat = |m: &[Vec<f64>]| nn(&m.concat());
        let dv = kl_divergence(&flat(&p), &flat(&q)).unwrap();
        prop_assert!((dm - dv).abs() <= 1e-10 * (1.0 + dv));
    }
}
