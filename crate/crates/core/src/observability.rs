//! Uniqueness analysis through the observability matrix of the linear
//! system `μ_{t+1} = 𝒜_tᵀμ_t`, `ρ_t = Cμ_t`, and the shifts that move
//! along the optimal set when the initial marginal is not identifiable.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::bridge::{DualState, ObservationModel, TransportPlan};
use crate::prior::MarkovPrior;
use crate::tensor::NonNegMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservabilityError {
    #[error("state {state} is downstream-unobserved at t={t} but has no zero column (internal inconsistency)")]
    InvarianceViolation { t: usize, state: usize },
    #[error("shift direction is not in the kernel (residual {residual:e})")]
    NotInKernel { residual: f64 },
    #[error("shift makes entry ({i}, {j}) of M_{t} negative ({value:e})")]
    NegativeMass {
        t: usize,
        i: usize,
        j: usize,
        value: f64,
    },
    #[error("not canonicalizable: {0}")]
    NotCanonicalizable(String),
    #[error("division by zero in the controlled prior at t={t}, state {state}")]
    DivideByZero { t: usize, state: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservabilityReport {
    pub rank: usize,
    /// Orthonormal basis of the kernel, one `n`-vector per direction.
    pub kernel_basis: Vec<Vec<f64>>,
    /// States whose columns of the observability matrix vanish.
    pub unobservable_downstream_set: Vec<usize>,
    /// The kernel is trivial.
    pub is_unique: bool,
    /// The kernel is spanned by unit vectors of the downstream-unobserved
    /// states, so the initial marginal is identifiable everywhere else.
    pub unique_up_to_downstream: bool,
}

/// Stacks `C, CA_0ᵀ, CA_1ᵀA_0ᵀ, …`: row `t·k + j`, column `i` is the mass
/// reaching sensor `j` at time `t` from a unit mass at state `i` at time 0.
pub fn observability_matrix(prior: &MarkovPrior, obs: &ObservationModel) -> DMatrix<f64> {
    observability_matrix_of(prior.steps(), obs)
}

/// [`observability_matrix`] for an arbitrary nonnegative sequence, such as
/// a controlled prior.
pub fn observability_matrix_of(steps: &[NonNegMatrix], obs: &ObservationModel) -> DMatrix<f64> {
    let n = obs.n();
    let k = obs.k();
    let blocks = steps.len() + 1;
    let mut o = DMatrix::zeros(blocks * k, n);
    let mut mu = vec![0.0; n];
    let mut next = vec![0.0; n];
    for i in 0..n {
        mu.iter_mut().for_each(|v| *v = 0.0);
        mu[i] = 1.0;
        for t in 0..blocks {
            for (j, &s) in obs.sensors().iter().enumerate() {
                o[(t * k + j, i)] = mu[s];
            }
            if t < steps.len() {
                steps[t].tr_mul_vec_into(&mu, &mut next);
                std::mem::swap(&mut mu, &mut next);
            }
        }
    }
    o
}

/// Default rank tolerance: `1e-10` times the largest column norm.
pub fn default_rank_tol(o: &DMatrix<f64>) -> f64 {
    let max_col = o.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    1e-10 * max_col
}

/// Numerical rank and an orthonormal kernel basis of `o` from its singular
/// value decomposition. The basis is put in a canonical form (reduced
/// echelon order, then Gram–Schmidt, largest entry positive) so that the
/// output does not depend on the factorization's internal choices.
pub fn kernel_and_rank(o: &DMatrix<f64>, tol: Option<f64>) -> (usize, Vec<Vec<f64>>) {
    let n = o.ncols();
    if n == 0 {
        return (0, vec![]);
    }
    let tol = tol.unwrap_or_else(|| default_rank_tol(o));
    let padded = if o.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (o.nrows(), n)).copy_from(o);
        p
    } else {
        o.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors were requested");
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let raw: Vec<Vec<f64>> = (rank..n)
        .map(|r| v_t.row(r).iter().copied().collect())
        .collect();
    (rank, canonical_basis(raw))
}

fn canonical_basis(mut rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    if rows.is_empty() {
        return rows;
    }
    let n = rows[0].len();
    let d = rows.len();
    // reduced row echelon form with column-order pivots
    let mut r = 0;
    for c in 0..n {
        if r == d {
            break;
        }
        let (p, best) = (r..d)
            .map(|i| (i, rows[i][c].abs()))
            .fold((r, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best < 1e-9 {
            continue;
        }
        rows.swap(r, p);
        let piv = rows[r][c];
        rows[r].iter_mut().for_each(|v| *v /= piv);
        for i in 0..d {
            if i != r {
                let f = rows[i][c];
                if f != 0.0 {
                    let pivot_row = rows[r].clone();
                    for (v, pv) in rows[i].iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        r += 1;
    }
    // Gram–Schmidt in order
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(d);
    for mut v in rows.into_iter() {
        for q in &out {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        for x in v.iter_mut() {
            if x.abs() < 1e-15 {
                *x = 0.0;
            }
        }
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() + 1e-12 { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        out.push(v);
    }
    out
}

/// States whose column of `o` is exactly zero.
pub fn zero_columns(o: &DMatrix<f64>) -> Vec<usize> {
    (0..o.ncols())
        .filter(|&i| o.column(i).iter().all(|v| *v == 0.0))
        .collect()
}

/// `𝓘_t`: states whose mass at time `t` never reaches a sensor at any
/// time `t, …, T`. Each `𝓘_t` is mapped into `𝓘_{t+1}` by the support of
/// `A_t`.
pub fn downstream_sets(prior: &MarkovPrior, obs: &ObservationModel) -> Vec<Vec<bool>> {
    let n = prior.n();
    let horizon = prior.horizon();
    let mut sets = vec![vec![false; n]; horizon + 1];
    for i in 0..n {
        sets[horizon][i] = !obs.is_observed(i);
    }
    for t in (0..horizon).rev() {
        for i in 0..n {
            sets[t][i] = !obs.is_observed(i) && prior.step(t).row(i).all(|(j, _)| sets[t + 1][j]);
        }
    }
    sets
}

/// The downstream-unobserved set `𝓘` (zero columns of `o`), cross-checked
/// against the time-indexed reachability sets.
pub fn downstream_unobserved_set(
    o: &DMatrix<f64>,
    prior: &MarkovPrior,
    obs: &ObservationModel,
) -> Result<Vec<usize>, ObservabilityError> {
    let zeros = zero_columns(o);
    let sets = downstream_sets(prior, obs);
    for i in 0..prior.n() {
        if sets[0][i] != zeros.contains(&i) {
            return Err(ObservabilityError::InvarianceViolation { t: 0, state: i });
        }
    }
    for t in 0..prior.horizon() {
        for i in (0..prior.n()).filter(|&i| sets[t][i]) {
            if let Some((j, _)) = prior.step(t).row(i).find(|(j, _)| !sets[t + 1][*j]) {
                return Err(ObservabilityError::InvarianceViolation { t: t + 1, state: j });
            }
        }
    }
    Ok(zeros)
}

/// Full analysis with the default (or given) rank tolerance.
pub fn analyze(
    prior: &MarkovPrior,
    obs: &ObservationModel,
    tol: Option<f64>,
) -> Result<ObservabilityReport, ObservabilityError> {
    if prior.n() != obs.n() {
        return Err(ObservabilityError::Dimension(format!(
            "prior has {} states, observation model {}",
            prior.n(),
            obs.n()
        )));
    }
    let o = observability_matrix(prior, obs);
    let (rank, kernel_basis) = kernel_and_rank(&o, tol);
    let set = downstream_unobserved_set(&o, prior, obs)?;
    Ok(ObservabilityReport {
        rank,
        is_unique: kernel_basis.is_empty(),
        unique_up_to_downstream: rank + set.len() == prior.n(),
        kernel_basis,
        unobservable_downstream_set: set,
    })
}

/// Largest principal angle (radians) between two subspaces given by
/// orthonormal bases; `π/2` when the dimensions differ.
pub fn max_principal_angle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.len() != b.len() {
        return std::f64::consts::FRAC_PI_2;
    }
    if a.is_empty() {
        return 0.0;
    }
    let n = a[0].len();
    let ma = DMatrix::from_fn(n, a.len(), |i, j| a[j][i]);
    let mb = DMatrix::from_fn(n, b.len(), |i, j| b[j][i]);
    let s = (ma.transpose() * mb).singular_values();
    let min_cos = s.iter().copied().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    min_cos.acos()
}

/// `𝒜_t = diag(u_t ⊘ w_t) A_t diag(w_{t+1})` with `w_0 = 𝟙`,
/// `w_t = u_t ⊙ φ_t` for `0 < t < T` and `w_T = u_T`.
///
/// Rows where `u_t = 0` (blocked sensors) or `w_t = 0` (no route to the
/// horizon) carry no mass in any feasible plan and are left empty.
pub fn controlled_prior(
    state: &DualState,
    prior: &MarkovPrior,
) -> Result<Vec<NonNegMatrix>, ObservabilityError> {
    let horizon = prior.horizon();
    let n = prior.n();
    let w = |t: usize| -> Vec<f64> {
        if t == 0 {
            vec![1.0; n]
        } else {
            state.w(t)
        }
    };
    (0..horizon)
        .map(|t| {
            let wt = w(t);
            let left = state
                .u(t)
                .iter()
                .zip(&wt)
                .enumerate()
                .map(|(i, (u, w))| {
                    if *u == 0.0 || *w == 0.0 {
                        Ok(0.0)
                    } else {
                        let r = u / w;
                        if r.is_finite() {
                            Ok(r)
                        } else {
                            Err(ObservabilityError::DivideByZero { t, state: i })
                        }
                    }
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let right = w(t + 1);
            prior
                .step(t)
                .scale(&left, &right)
                .map_err(|e| ObservabilityError::Dimension(e.to_string()))
        })
        .collect()
}

/// Entries of a shifted plan within this fraction of the magnitude of
/// their summands are treated as exact cancellations.
const SHIFT_TOL: f64 = 1e-10;

/// `M̃_t = M_t + diag(z_t)𝒜_t` with `z_{t+1} = 𝒜_tᵀz_t`. `z_0` must lie in
/// the span of `kernel` and keep the initial marginal nonnegative.
pub fn optimal_set_shift(
    plan: &TransportPlan,
    cal_a: &[NonNegMatrix],
    z0: &[f64],
    kernel: &[Vec<f64>],
) -> Result<TransportPlan, ObservabilityError> {
    let n = plan.n();
    if z0.len() != n || cal_a.len() != plan.horizon() {
        return Err(ObservabilityError::Dimension(
            "shift, plan and controlled prior disagree".into(),
        ));
    }
    let z_norm = z0.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut proj = vec![0.0; n];
    for q in kernel {
        let dot: f64 = q.iter().zip(z0).map(|(a, b)| a * b).sum();
        proj.iter_mut().zip(q).for_each(|(p, x)| *p += dot * x);
    }
    let residual = proj
        .iter()
        .zip(z0)
        .map(|(p, z)| (p - z) * (p - z))
        .sum::<f64>()
        .sqrt();
    if residual > 1e-8 * z_norm.max(1.0) {
        return Err(ObservabilityError::NotInKernel { residual });
    }

    let mut z = z0.to_vec();
    let mut steps = Vec::with_capacity(plan.horizon());
    for (t, (m, a)) in plan.steps().iter().zip(cal_a).enumerate() {
        // (value, magnitude of the summands) per entry
        let mut sums: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
        for (i, j, v) in m.triplets() {
            let e = sums.entry((i, j)).or_default();
            e.0 += v;
            e.1 += v;
        }
        for (i, j, v) in a.triplets() {
            if z[i] != 0.0 {
                let e = sums.entry((i, j)).or_default();
                e.0 += z[i] * v;
                e.1 += (z[i] * v).abs();
            }
        }
        let mut out = Vec::with_capacity(sums.len());
        for ((i, j), (v, mag)) in sums {
            if v < -SHIFT_TOL * mag {
                return Err(ObservabilityError::NegativeMass { t, i, j, value: v });
            }
            if v > SHIFT_TOL * mag {
                out.push((i, j, v));
            }
        }
        steps.push(NonNegMatrix::from_triplets(n, n, out).expect("entries are positive and in range"));
        z = a.tr_mul_vec(&z);
    }
    TransportPlan::new(steps).map_err(|e| ObservabilityError::Dimension(e.to_string()))
}

/// Output of [`canonicalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Canonical {
    pub plan: TransportPlan,
    /// Set when part of the kernel is not explained by `𝓘`; the plan then
    /// only has its `𝓘` mass removed.
    pub warning: Option<ObservabilityError>,
}

/// Removes the initial mass on the downstream-unobserved states by shifting
/// along `z_0 = −(M_0𝟙)|_𝓘`. The objective is unchanged.
pub fn canonicalize(
    plan: &TransportPlan,
    report: &ObservabilityReport,
    cal_a: &[NonNegMatrix],
) -> Result<Canonical, ObservabilityError> {
    let warning = (!report.unique_up_to_downstream).then(|| {
        ObservabilityError::NotCanonicalizable(
            "kernel directions outside the downstream-unobserved states".into(),
        )
    });
    if report.kernel_basis.is_empty() || plan.horizon() == 0 {
        return Ok(Canonical {
            plan: plan.clone(),
            warning,
        });
    }
    let mu0 = plan.marginal(0);
    let mut z0 = vec![0.0; plan.n()];
    for &i in &report.unobservable_downstream_set {
        z0[i] = -mu0[i];
    }
    if z0.iter().all(|v| *v == 0.0) {
        return Ok(Canonical {
            plan: plan.clone(),
            warning,
        });
    }
    // unit vectors of 𝓘 lie in the kernel by construction
    let units: Vec<Vec<f64>> = report
        .unobservable_downstream_set
        .iter()
        .map(|&i| {
            let mut e = vec![0.0; plan.n()];
            e[i] = 1.0;
            e
        })
        .collect();
    let shifted = optimal_set_shift(plan, cal_a, &z0, &units)?;
    Ok(Canonical {
        plan: shifted,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{proximal_solve, ObservationSeries, SolverConfig};
    use approx::assert_relative_eq;

    fn two_state() -> (MarkovPrior, ObservationModel) {
        let a = NonNegMatrix::from_dense(&[vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        (
            MarkovPrior::stationary(a, 1).unwrap(),
            ObservationModel::new(2, vec![0]).unwrap(),
        )
    }

    fn three_state() -> (MarkovPrior, ObservationModel) {
        let a = NonNegMatrix::from_dense(&[
            vec![0.5, 0.0, 0.5],
            vec![0.0, 0.5, 0.5],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        (
            MarkovPrior::stationary(a, 1).unwrap(),
            ObservationModel::new(3, vec![2]).unwrap(),
        )
    }

    #[test]
    fn example_matrices() {
        let (p, c) = two_state();
        let o = observability_matrix(&p, &c);
        assert_eq!(o, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.0]));
        let (p, c) = three_state();
        let o = observability_matrix(&p, &c);
        assert_eq!(o, DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 1.0, 0.5, 0.5, 1.0]));
    }

    #[test]
    fn example_reports() {
        let (p, c) = two_state();
        let r = analyze(&p, &c, None).unwrap();
        assert_eq!(r.rank, 1);
        assert_eq!(r.kernel_basis, vec![vec![0.0, 1.0]]);
        assert_eq!(r.unobservable_downstream_set, vec![1]);
        assert!(!r.is_unique && r.unique_up_to_downstream);

        let (p, c) = three_state();
        let r = analyze(&p, &c, None).unwrap();
        assert_eq!(r.rank, 2);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(r.kernel_basis.len(), 1);
        assert_relative_eq!(r.kernel_basis[0][0], h, epsilon = 1e-12);
        assert_relative_eq!(r.kernel_basis[0][1], -h, epsilon = 1e-12);
        assert!(r.unobservable_downstream_set.is_empty());
        assert!(!r.is_unique && !r.unique_up_to_downstream);
    }

    #[test]
    fn full_observation_is_unique() {
        let (p, _) = three_state();
        let r = analyze(&p, &ObservationModel::full(3), None).unwrap();
        assert!(r.is_unique);
        assert_eq!(r.rank, 3);
        assert!(r.unobservable_downstream_set.is_empty());
    }

    #[test]
    fn downstream_set_is_time_indexed() {
        // 0 → 1 → 2 in one step each, sensor at 2, one step
        let a = NonNegMatrix::from_dense(&[
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let p = MarkovPrior::stationary(a, 1).unwrap();
        let c = ObservationModel::new(3, vec![2]).unwrap();
        let r = analyze(&p, &c, None).unwrap();
        assert_eq!(r.unobservable_downstream_set, vec![0]);
        let sets = downstream_sets(&p, &c);
        assert_eq!(sets[1], vec![true, true, false]);
    }

    #[test]
    fn principal_angles() {
        let a = vec![vec![1.0, 0.0, 0.0]];
        let b = vec![vec![0.0, 1.0, 0.0]];
        assert_relative_eq!(max_principal_angle(&a, &b), std::f64::consts::FRAC_PI_2);
        assert_eq!(max_principal_angle(&a, &a), 0.0);
        assert_eq!(max_principal_angle(&[], &[]), 0.0);
    }

    #[test]
    fn two_state_family_and_canonical_form() {
        let (p, c) = two_state();
        let rho = ObservationSeries::from_rows(vec![vec![2.0], vec![1.0]]).unwrap();
        let config = SolverConfig {
            eta_init: crate::bridge::EtaInit::Given(vec![5.0]),
            ..SolverConfig::default()
        };
        let out = proximal_solve(&p, &c, &rho, &config).unwrap();
        assert_eq!(out.plan.step(0).to_dense(), vec![vec![1.0, 1.0], vec![0.0, 5.0]]);
        let cal_a = controlled_prior(&out.state, &p).unwrap();
        assert_eq!(cal_a[0], *p.step(0));
        let report = analyze(&p, &c, None).unwrap();

        let more = optimal_set_shift(&out.plan, &cal_a, &[0.0, 2.0], &report.kernel_basis).unwrap();
        assert_eq!(more.step(0).to_dense(), vec![vec![1.0, 1.0], vec![0.0, 7.0]]);
        assert!(matches!(
            optimal_set_shift(&out.plan, &cal_a, &[1.0, 0.0], &report.kernel_basis),
            Err(ObservabilityError::NotInKernel { .. })
        ));
        assert!(matches!(
            optimal_set_shift(&out.plan, &cal_a, &[0.0, -6.0], &report.kernel_basis),
            Err(ObservabilityError::NegativeMass { .. })
        ));

        let canon = canonicalize(&out.plan, &report, &cal_a).unwrap();
        assert!(canon.warning.is_none());
        assert_eq!(canon.plan.step(0).to_dense(), vec![vec![1.0, 1.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn three_state_is_not_canonicalizable() {
        let (p, c) = three_state();
        let rho = ObservationSeries::from_rows(vec![vec![0.0], vec![1.0]]).unwrap();
        let out = proximal_solve(&p, &c, &rho, &SolverConfig::default()).unwrap();
        let report = analyze(&p, &c, None).unwrap();
        let cal_a = controlled_prior(&out.state, &p).unwrap();
        let canon = canonicalize(&out.plan, &report, &cal_a).unwrap();
        assert!(matches!(canon.warning, Some(ObservabilityError::NotCanonicalizable(_))));
        assert_eq!(canon.plan, out.plan);
    }
}
