//! Bridge problems with partially observed marginals.
//!
//! Given a Markov prior `A_0, …, A_{T−1}` and sensor readings `ρ_t = C μ_t`
//! at `k` of the `n` states, find transport plans `M_t` that match the
//! readings and stay as close as possible (in normalized KL) to the prior
//! dynamics. The unobserved part `η` of the initial marginal is estimated by
//! an entropic proximal iteration whose steps are solved by block coordinate
//! ascent on the dual scalings `u_t`.

mod dual;
mod log_domain;
mod plan;
mod solve;
mod support;

use thiserror::Error;

use crate::tensor::{NonNegVector, TensorError};

pub use dual::{
    backward_pass, bca_sweep, dual_constraint_gap, dual_objective, dual_objective_at,
    forward_pass, observation_residual, recover_primal, recover_primal_unchecked,
    shifted_dual_objective, DualState, SweepStats, DEGENERATE_FLOOR,
};
pub use log_domain::LogDualState;
pub use plan::{inner_primal_objective, primal_objective, TransportPlan};
pub use solve::{
    default_eta, inner_solve, objective_at, proximal_solve, Domain, EtaInit, InnerMode,
    InnerOutcome, ProximalOutcome, ProximalSolver, SolverConfig, Trace, TraceRow,
};
pub use support::{reduce_support, SupportReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("infeasible: sensor {sensor} (state {state}) reads {demand} at t={t} but no mass can reach it")]
    Infeasible {
        t: usize,
        sensor: usize,
        state: usize,
        demand: f64,
    },
    #[error("degenerate update at t={t}, sensor {sensor}: the prior routes no mass to a sensor that reads {demand}")]
    DegenerateUpdate { t: usize, sensor: usize, demand: f64 },
    #[error("not converged: observation residual {residual:e} exceeds {tol:e}")]
    NotConverged { residual: f64, tol: f64 },
    #[error("no convergence after {iters} iterations (last change {last_change:e}, residual {residual:e})")]
    MaxItersExceeded {
        iters: usize,
        last_change: f64,
        residual: f64,
        trace: Box<Trace>,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ordered sensor placement `π`: `(Cx)_j = x_{π_j}`, and the complement
/// `C̄` selects the remaining states in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationModel {
    n: usize,
    pi: Vec<usize>,
    complement: Vec<usize>,
    /// `slot[i] = Some(j)` when state `i` is sensor `j`.
    slot: Vec<Option<usize>>,
}

impl ObservationModel {
    pub fn new(n: usize, pi: Vec<usize>) -> Result<Self, SolverError> {
        let mut slot = vec![None; n];
        for (j, &i) in pi.iter().enumerate() {
            if i >= n {
                return Err(SolverError::InvalidInput(format!(
                    "sensor index {i} out of range for {n} states"
                )));
            }
            if slot[i].replace(j).is_some() {
                return Err(SolverError::InvalidInput(format!("duplicate sensor index {i}")));
            }
        }
        let complement = (0..n).filter(|i| slot[*i].is_none()).collect();
        Ok(Self {
            n,
            pi,
            complement,
            slot,
        })
    }

    pub fn full(n: usize) -> Self {
        Self::new(n, (0..n).collect()).expect("identity placement is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn sensors(&self) -> &[usize] {
        &self.pi
    }

    pub fn unobserved(&self) -> &[usize] {
        &self.complement
    }

    /// Sensor slot of state `i`, if observed.
    pub fn slot(&self, i: usize) -> Option<usize> {
        self.slot[i]
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.slot[i].is_some()
    }

    /// `C x`
    pub fn select(&self, x: &[f64]) -> Vec<f64> {
        self.pi.iter().map(|&i| x[i]).collect()
    }

    /// `C̄ x`
    pub fn select_unobserved(&self, x: &[f64]) -> Vec<f64> {
        self.complement.iter().map(|&i| x[i]).collect()
    }

    /// `Cᵀ y + C̄ᵀ z`
    pub fn embed(&self, observed: &[f64], unobserved: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (&i, v) in self.pi.iter().zip(observed) {
            x[i] = *v;
        }
        for (&i, v) in self.complement.iter().zip(unobserved) {
            x[i] = *v;
        }
        x
    }
}

/// Sensor readings `ρ_0, …, ρ_T` in grams.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    rho: Vec<NonNegVector>,
}

impl ObservationSeries {
    pub fn new(rho: Vec<NonNegVector>) -> Result<Self, SolverError> {
        if let Some(first) = rho.first() {
            if let Some(t) = rho.iter().position(|r| r.len() != first.len()) {
                return Err(SolverError::InvalidInput(format!(
                    "rho_{t} has length {}, expected {}",
                    rho[t].len(),
                    first.len()
                )));
            }
        }
        Ok(Self { rho })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, SolverError> {
        let rho = rows
            .into_iter()
            .map(NonNegVector::new)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rho)
    }

    /// `T`, one less than the number of readings.
    pub fn horizon(&self) -> usize {
        self.rho.len().saturating_sub(1)
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn k(&self) -> usize {
        self.rho.first().map_or(0, NonNegVector::len)
    }

    pub fn at(&self, t: usize) -> &[f64] {
        self.rho[t].as_slice()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.rho.iter().map(NonNegVector::as_slice)
    }

    /// Largest reading over all sensors and times.
    pub fn max_entry(&self) -> f64 {
        self.rho.iter().map(NonNegVector::max).fold(0.0, f64::max)
    }

    /// Largest total reading `𝟙ᵀρ_t` over time.
    pub fn max_total(&self) -> f64 {
        self.rho.iter().map(NonNegVector::sum).fold(0.0, f64::max)
    }
}

pub(crate) fn check_dims(
    prior: &crate::prior::MarkovPrior,
    obs: &ObservationModel,
    rho: &ObservationSeries,
) -> Result<(), SolverError> {
    if obs.n() != prior.n() {
        return Err(SolverError::InvalidInput(format!(
            "observation model has {} states, prior has {}",
            obs.n(),
            prior.n()
        )));
    }
    if rho.len() != prior.horizon() + 1 {
        return Err(SolverError::InvalidInput(format!(
            "{} readings for a horizon of {} steps (expected {})",
            rho.len(),
            prior.horizon(),
            prior.horizon() + 1
        )));
    }
    if rho.k() != obs.k() {
        return Err(SolverError::InvalidInput(format!(
            "readings have {} sensors, observation model has {}",
            rho.k(),
            obs.k()
        )));
    }
    Ok(())
}
