use crate::prior::MarkovPrior;

use super::{check_dims, ObservationModel, ObservationSeries, SolverError};

/// What [`reduce_support`] removed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SupportReport {
    /// `forced_zero[t]` lists the states that must carry no mass at time `t`.
    pub forced_zero: Vec<Vec<usize>>,
    /// Removed prior entries `(t, i, j)`.
    pub removed: Vec<(usize, usize, usize)>,
}

impl SupportReport {
    pub fn is_empty(&self) -> bool {
        self.removed.is_empty()
    }
}

/// Propagates the zeros forced by zero readings and drops the prior
/// transitions that no feasible plan can use.
///
/// A state is forced to zero at `t` if a sensor there reads zero, if
/// (for `t < T`) every transition out of it leads to a forced zero, or if
/// (for `t ≥ 1`) every transition into it starts from one. The reduction
/// is applied until nothing changes, so a second call is a no-op.
pub fn reduce_support(
    prior: &MarkovPrior,
    obs: &ObservationModel,
    rho: &ObservationSeries,
) -> Result<(MarkovPrior, SupportReport), SolverError> {
    check_dims(prior, obs, rho)?;
    let n = prior.n();
    let horizon = prior.horizon();
    let mut zero = vec![vec![false; n]; horizon + 1];
    for (t, row) in zero.iter_mut().enumerate() {
        for (j, &s) in obs.sensors().iter().enumerate() {
            if rho.at(t)[j] == 0.0 {
                row[s] = true;
            }
        }
    }

    let transposed: Vec<_> = prior.steps().iter().map(|a| a.transpose()).collect();
    loop {
        let mut changed = false;
        for t in (0..horizon).rev() {
            let a = prior.step(t);
            for i in 0..n {
                if !zero[t][i] && a.row(i).all(|(j, _)| zero[t + 1][j]) {
                    zero[t][i] = true;
                    changed = true;
                }
            }
        }
        for t in 1..=horizon {
            let at = &transposed[t - 1];
            for j in 0..n {
                if !zero[t][j] && at.row(j).all(|(i, _)| zero[t - 1][i]) {
                    zero[t][j] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    for (t, row) in zero.iter().enumerate() {
        for (j, &s) in obs.sensors().iter().enumerate() {
            let demand = rho.at(t)[j];
            if row[s] && demand > 0.0 {
                return Err(SolverError::Infeasible {
                    t,
                    sensor: j,
                    state: s,
                    demand,
                });
            }
        }
    }

    let mut removed = Vec::new();
    let steps = prior
        .steps()
        .iter()
        .enumerate()
        .map(|(t, a)| {
            a.retain(|i, j, _| {
                let keep = !zero[t][i] && !zero[t + 1][j];
                if !keep {
                    removed.push((t, i, j));
                }
                keep
            })
        })
        .collect();
    let reduced = MarkovPrior::new(n, steps).expect("removing entries keeps row sums <= 1");
    let forced_zero = zero
        .iter()
        .map(|row| (0..n).filter(|i| row[*i]).collect())
        .collect();
    Ok((
        reduced,
        SupportReport {
            forced_zero,
            removed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NonNegMatrix;

    fn two_state() -> (MarkovPrior, ObservationModel) {
        let a = NonNegMatrix::from_dense(&[vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        (
            MarkovPrior::stationary(a, 1).unwrap(),
            ObservationModel::new(2, vec![0]).unwrap(),
        )
    }

    #[test]
    fn positive_readings_leave_prior_alone() {
        let (prior, obs) = two_state();
        let rho = ObservationSeries::from_rows(vec![vec![2.0], vec![1.0]]).unwrap();
        let (reduced, report) = reduce_support(&prior, &obs, &rho).unwrap();
        assert_eq!(reduced, prior);
        assert!(report.is_empty());
    }

    #[test]
    fn zero_reading_removes_incoming_transition() {
        let (prior, obs) = two_state();
        let rho = ObservationSeries::from_rows(vec![vec![2.0], vec![0.0]]).unwrap();
        let (reduced, report) = reduce_support(&prior, &obs, &rho).unwrap();
        assert_eq!(report.removed, vec![(0, 0, 0)]);
        assert_eq!(report.forced_zero, vec![vec![], vec![0]]);
        assert_eq!(reduced.step(0).to_dense(), vec![vec![0.0, 0.5], vec![0.0, 1.0]]);
        let (again, report2) = reduce_support(&reduced, &obs, &rho).unwrap();
        assert_eq!(again, reduced);
        assert!(report2.is_empty());
    }

    #[test]
    fn blocked_gateway_is_infeasible() {
        // 0 → 1 → 2 with 2 absorbing; sensors at 1 (always 0) and 2
        let a = NonNegMatrix::from_dense(&[
            vec![0.5, 0.5, 0.0],
            vec![0.0, 0.5, 0.5],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let prior = MarkovPrior::stationary(a, 2).unwrap();
        let obs = ObservationModel::new(3, vec![1, 2]).unwrap();
        let rho = ObservationSeries::from_rows(vec![
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let err = reduce_support(&prior, &obs, &rho).unwrap_err();
        assert!(matches!(err, SolverError::Infeasible { t: 2, sensor: 1, state: 2, .. }));
    }
}
