use crate::prior::MarkovPrior;
use crate::tensor::{kl_divergence, NonNegMatrix, NonNegVector};

use super::{ObservationModel, ObservationSeries, SolverError};

/// Transport plans `M_0, …, M_{T−1}`; `(M_t)_{ij}` is the mass moving from
/// state `i` at time `t` to state `j` at time `t+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    steps: Vec<NonNegMatrix>,
}

impl TransportPlan {
    pub fn new(steps: Vec<NonNegMatrix>) -> Result<Self, SolverError> {
        if let Some(first) = steps.first() {
            if first.rows() != first.cols() {
                return Err(SolverError::InvalidInput("plan matrices must be square".into()));
            }
            for m in &steps {
                m.same_shape(first)?;
            }
        }
        Ok(Self { steps })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn n(&self) -> usize {
        self.steps.first().map_or(0, NonNegMatrix::rows)
    }

    pub fn step(&self, t: usize) -> &NonNegMatrix {
        &self.steps[t]
    }

    pub fn steps(&self) -> &[NonNegMatrix] {
        &self.steps
    }

    /// `μ_t = M_t𝟙` for `t < T` and `μ_T = M_{T−1}ᵀ𝟙`.
    pub fn marginal(&self, t: usize) -> NonNegVector {
        if t < self.horizon() {
            self.steps[t].row_sums()
        } else {
            self.steps[t - 1].col_sums()
        }
    }

    pub fn marginals(&self) -> Vec<NonNegVector> {
        if self.steps.is_empty() {
            return vec![];
        }
        (0..=self.horizon()).map(|t| self.marginal(t)).collect()
    }

    /// Total mass `𝟙ᵀM_0𝟙`.
    pub fn total_mass(&self) -> f64 {
        self.steps.first().map_or(0.0, |m| m.row_sums().sum())
    }

    /// `max_t ‖M_t𝟙 − M_{t−1}ᵀ𝟙‖_∞`.
    pub fn matching_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 1..self.horizon() {
            let inflow = self.steps[t - 1].col_sums();
            let outflow = self.steps[t].row_sums();
            for (a, b) in inflow.iter().zip(outflow.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    /// `max_t ‖Cμ_t − ρ_t‖_∞`.
    pub fn observation_violation(&self, obs: &ObservationModel, rho: &ObservationSeries) -> f64 {
        let mut worst: f64 = 0.0;
        for (t, mu) in self.marginals().iter().enumerate() {
            for (got, want) in obs.select(mu.as_slice()).iter().zip(rho.at(t)) {
                worst = worst.max((got - want).abs());
            }
        }
        worst
    }

    /// `supp(M_t) ⊆ supp(A_t)` for every `t`.
    pub fn supported_by(&self, prior: &MarkovPrior) -> bool {
        self.horizon() == prior.horizon()
            && self
                .steps
                .iter()
                .zip(prior.steps())
                .all(|(m, a)| m.support_subset_of(a))
    }
}

fn check_horizon(plan: &TransportPlan, prior: &MarkovPrior) -> Result<(), SolverError> {
    if plan.horizon() != prior.horizon() {
        return Err(SolverError::InvalidInput(format!(
            "plan has {} steps, prior has {}",
            plan.horizon(),
            prior.horizon()
        )));
    }
    Ok(())
}

/// `Σ_t D(M_t | diag(M_t𝟙)A_t)`.
pub fn primal_objective(plan: &TransportPlan, prior: &MarkovPrior) -> Result<f64, SolverError> {
    check_horizon(plan, prior)?;
    let mut total = 0.0;
    for (m, a) in plan.steps().iter().zip(prior.steps()) {
        let rows = m.row_sums();
        let q = a.scale(rows.as_slice(), &vec![1.0; a.cols()])?;
        total += kl_divergence(m, &q)?;
    }
    Ok(total)
}

/// Objective of a proximal step: `D(M_0 | diag(μ̂)A_0) + Σ_{t≥1} D(M_t | diag(M_t𝟙)A_t)`.
pub fn inner_primal_objective(
    plan: &TransportPlan,
    prior: &MarkovPrior,
    mu_hat: &[f64],
) -> Result<f64, SolverError> {
    check_horizon(plan, prior)?;
    let mut total = 0.0;
    for (t, (m, a)) in plan.steps().iter().zip(prior.steps()).enumerate() {
        let left = if t == 0 {
            mu_hat.to_vec()
        } else {
            m.row_sums().into_vec()
        };
        let q = a.scale(&left, &vec![1.0; a.cols()])?;
        total += kl_divergence(m, &q)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_state_prior() -> MarkovPrior {
        let a = NonNegMatrix::from_dense(&[vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        MarkovPrior::stationary(a, 1).unwrap()
    }

    fn plan(rows: &[Vec<f64>]) -> TransportPlan {
        TransportPlan::new(vec![NonNegMatrix::from_dense(rows).unwrap()]).unwrap()
    }

    #[test]
    fn prior_consistent_plan_costs_nothing() {
        let prior = two_state_prior();
        for eta in [0.0, 1.0, 5.0] {
            let m = plan(&[vec![1.0, 1.0], vec![0.0, eta]]);
            assert_eq!(primal_objective(&m, &prior).unwrap(), 0.0);
            assert_eq!(m.marginal(1).as_slice(), &[1.0, 1.0 + eta]);
        }
    }

    #[test]
    fn deviating_row_by_hand() {
        // row (2, 0) against (m/2, m/2) with m = 2: 2 ln 2 − 2 + 1 + 1
        let prior = two_state_prior();
        let m = plan(&[vec![2.0, 0.0], vec![0.0, 0.0]]);
        assert_relative_eq!(
            primal_objective(&m, &prior).unwrap(),
            2.0 * 2f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn support_violation() {
        let prior = two_state_prior();
        let m = plan(&[vec![1.0, 1.0], vec![1.0, 0.0]]);
        assert!(!m.supported_by(&prior));
        assert!(matches!(
            primal_objective(&m, &prior),
            Err(SolverError::Tensor(_))
        ));
    }

    #[test]
    fn violations() {
        let a = NonNegMatrix::from_dense(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        let b = NonNegMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let p = TransportPlan::new(vec![a, b]).unwrap();
        assert_eq!(p.matching_violation(), 1.0);
        let obs = ObservationModel::new(2, vec![0]).unwrap();
        let rho = ObservationSeries::from_rows(vec![vec![2.0], vec![1.0], vec![1.5]]).unwrap();
        assert_eq!(p.observation_violation(&obs, &rho), 0.5);
        assert_eq!(p.total_mass(), 4.0);
    }
}
