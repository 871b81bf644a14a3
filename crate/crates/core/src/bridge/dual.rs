use crate::prior::MarkovPrior;
use crate::tensor::NonNegMatrix;

use super::plan::TransportPlan;
use super::{ObservationModel, ObservationSeries, SolverError};

/// Values of `φ_t ⊙ φ̂_t` below this at a sensor that reads positive mass
/// are treated as structural zeros.
pub const DEGENERATE_FLOOR: f64 = 1e-300;

/// Scalings `u_t` and the forward/backward messages `φ̂_t`, `φ_t`.
///
/// `u_t` equals one on unobserved states. Between calls to the public
/// operations `φ̂` is consistent with `u` and `μ̂`, and `φ` with `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    u: Vec<Vec<f64>>,
    phi_hat: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
    mu_hat: Vec<f64>,
}

/// Summary of one sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepStats {
    /// Largest relative mismatch `|C(φ_t⊙u_t⊙φ̂_t) − ρ_t| / ρ_t` measured
    /// right after each `u_t` update (absolute where `ρ = 0`).
    pub post_update_mismatch: f64,
    /// Observation residual once the sweep and its backward pass are done.
    pub residual: f64,
    pub dual_objective: f64,
}

/// `φ̂_0 = μ̂`, `φ̂_{t+1} = A_tᵀ(φ̂_t ⊙ u_t)`.
pub fn forward_pass(prior: &MarkovPrior, u: &[Vec<f64>], mu_hat: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(prior.horizon() + 1);
    out.push(mu_hat.to_vec());
    for (t, a) in prior.steps().iter().enumerate() {
        let x = hadamard(&out[t], &u[t]);
        out.push(a.tr_mul_vec(&x));
    }
    out
}

/// `φ_T = 𝟙`, `φ_t = A_t(u_{t+1} ⊙ φ_{t+1})`.
pub fn backward_pass(prior: &MarkovPrior, u: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = prior.n();
    let horizon = prior.horizon();
    let mut out = vec![vec![1.0; n]; horizon + 1];
    for t in (0..horizon).rev() {
        let x = hadamard(&u[t + 1], &out[t + 1]);
        out[t] = prior.step(t).mul_vec(&x);
    }
    out
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

impl DualState {
    /// Starts from `u ≡ 𝟙`.
    pub fn new(prior: &MarkovPrior, mu_hat: Vec<f64>) -> Result<Self, SolverError> {
        let u = vec![vec![1.0; prior.n()]; prior.horizon() + 1];
        Self::with_scalings(prior, mu_hat, u)
    }

    pub fn with_scalings(
        prior: &MarkovPrior,
        mu_hat: Vec<f64>,
        u: Vec<Vec<f64>>,
    ) -> Result<Self, SolverError> {
        let n = prior.n();
        if mu_hat.len() != n {
            return Err(SolverError::InvalidInput(format!(
                "mu_hat has length {}, expected {n}",
                mu_hat.len()
            )));
        }
        if mu_hat.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SolverError::InvalidInput("mu_hat must be finite and nonnegative".into()));
        }
        if u.len() != prior.horizon() + 1 || u.iter().any(|v| v.len() != n) {
            return Err(SolverError::InvalidInput("scalings have the wrong shape".into()));
        }
        if u.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SolverError::InvalidInput("scalings must be finite and nonnegative".into()));
        }
        let phi_hat = forward_pass(prior, &u, &mu_hat);
        let phi = backward_pass(prior, &u);
        Ok(Self {
            u,
            phi_hat,
            phi,
            mu_hat,
        })
    }

    pub(crate) fn from_parts(
        u: Vec<Vec<f64>>,
        phi_hat: Vec<Vec<f64>>,
        phi: Vec<Vec<f64>>,
        mu_hat: Vec<f64>,
    ) -> Self {
        Self {
            u,
            phi_hat,
            phi,
            mu_hat,
        }
    }

    pub fn horizon(&self) -> usize {
        self.u.len() - 1
    }

    pub fn n(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn u(&self, t: usize) -> &[f64] {
        &self.u[t]
    }

    pub fn phi(&self, t: usize) -> &[f64] {
        &self.phi[t]
    }

    pub fn phi_hat(&self, t: usize) -> &[f64] {
        &self.phi_hat[t]
    }

    pub fn mu_hat(&self) -> &[f64] {
        &self.mu_hat
    }

    pub fn scalings(&self) -> &[Vec<f64>] {
        &self.u
    }

    /// `λ_t = log C u_t`; blocked sensors give `−∞`.
    pub fn lambda(&self, obs: &ObservationModel, t: usize) -> Vec<f64> {
        obs.sensors().iter().map(|&s| self.u[t][s].ln()).collect()
    }

    /// Current marginal `φ̂_t ⊙ u_t ⊙ φ_t`.
    pub fn marginal(&self, t: usize) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.phi_hat[t][i] * self.u[t][i] * self.phi[t][i])
            .collect()
    }

    /// Replaces `μ̂` and refreshes the forward messages; `u` is kept.
    pub fn set_mu_hat(&mut self, prior: &MarkovPrior, mu_hat: Vec<f64>) {
        debug_assert_eq!(mu_hat.len(), self.n());
        self.mu_hat = mu_hat;
        self.phi_hat = forward_pass(prior, &self.u, &self.mu_hat);
    }

    /// `w_t = u_t ⊙ φ_t`, so that `w_T = u_T` and `w_t = u_t ⊙ A_t w_{t+1}`.
    pub fn w(&self, t: usize) -> Vec<f64> {
        hadamard(&self.u[t], &self.phi[t])
    }
}

/// One pass of block coordinate ascent: for `t = 0..=T` set
/// `C u_t = ρ_t ⊘ C(φ_t ⊙ φ̂_t)` and push `φ̂_{t+1}` forward, then refresh
/// every `φ_t` with a full backward pass.
pub fn bca_sweep(
    state: &mut DualState,
    prior: &MarkovPrior,
    obs: &ObservationModel,
    rho: &ObservationSeries,
) -> Result<SweepStats, SolverError> {
    sweep(state, prior, obs, rho, false)
}

/// Like [`bca_sweep`], but the whole initial marginal is held at `μ̂`: the
/// unobserved coordinates of `u_0` are updated too.
pub(crate) fn pinned_start_sweep(
    state: &mut DualState,
    prior: &MarkovPrior,
    obs: &ObservationModel,
    rho: &ObservationSeries,
) -> Result<SweepStats, SolverError> {
    sweep(state, prior, obs, rho, true)
}

fn sweep(
    state: &mut DualState,
    prior: &MarkovPrior,
    obs: &ObservationModel,
    rho: &ObservationSeries,
    pin_start: bool,
) -> Result<SweepStats, SolverError> {
    let horizon = prior.horizon();
    let n = prior.n();
    let mut scratch = vec![0.0; n];
    let mut mismatch: f64 = 0.0;
    for t in 0..=horizon {
        let r = rho.at(t);
        if t == 0 && pin_start {
            for &i in obs.unobserved() {
                let phi = state.phi[0][i];
                state.u[0][i] = if state.mu_hat[i] == 0.0 {
                    1.0
                } else if phi < DEGENERATE_FLOOR {
                    return Err(SolverError::InvalidInput(format!(
                        "the mass at state {i} has no route consistent with the readings"
                    )));
                } else {
                    1.0 / phi
                };
            }
        }
        for (j, &s) in obs.sensors().iter().enumerate() {
            let d = state.phi[t][s] * state.phi_hat[t][s];
            state.u[t][s] = if r[j] == 0.0 {
                0.0
            } else if d < DEGENERATE_FLOOR || !d.is_finite() {
                return Err(SolverError::DegenerateUpdate {
                    t,
                    sensor: j,
                    demand: r[j],
                });
            } else {
                r[j] / d
            };
            let got = d * state.u[t][s];
            let err = if r[j] > 0.0 {
                (got - r[j]).abs() / r[j]
            } else {
                got.abs()
            };
            mismatch = mismatch.max(err);
        }
        if t < horizon {
            let (head, tail) = state.phi_hat.split_at_mut(t + 1);
            for ((x, p), u) in scratch.iter_mut().zip(&head[t]).zip(&state.u[t]) {
                *x = p * u;
            }
            prior.step(t).tr_mul_vec_into(&scratch, &mut tail[0]);
        }
    }
    for t in (0..horizon).rev() {
        let (head, tail) = state.phi.split_at_mut(t + 1);
        for ((x, p), u) in scratch.iter_mut().zip(&tail[0]).zip(&state.u[t + 1]) {
            *x = p * u;
        }
        prior.step(t).mul_vec_into(&scratch, &mut head[t]);
    }
    Ok(SweepStats {
        post_update_mismatch: mismatch,
        residual: observation_residual(state, obs, rho),
        dual_objective: dual_objective(state, obs, rho),
    })
}

/// `max_t ‖C(φ_t ⊙ u_t ⊙ φ̂_t) − ρ_t‖_∞`.
pub fn observation_residual(
    state: &DualState,
    obs: &ObservationModel,
    rho: &ObservationSeries,
) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..=state.horizon() {
        for (j, &s) in obs.sensors().iter().enumerate() {
            let got = state.phi[t][s] * state.u[t][s] * state.phi_hat[t][s];
            worst = worst.max((got - rho.at(t)[j]).abs());
        }
    }
    worst
}

/// `Σ_t λ_tᵀρ_t − (φ_t ⊙ φ̂_t)ᵀu_t`, the second term collected at time `t`.
pub fn dual_objective_at(
    state: &DualState,
    obs: &ObservationModel,
    rho: &ObservationSeries,
    t: usize,
) -> f64 {
    let mut linear = 0.0;
    for (s, r) in (0..=state.horizon()).map(|s| (s, rho.at(s))) {
        for (j, &i) in obs.sensors().iter().enumerate() {
            if r[j] > 0.0 {
                linear += state.u[s][i].ln() * r[j];
            }
        }
    }
    let mass: f64 = (0..state.n())
        .map(|i| state.phi[t][i] * state.phi_hat[t][i] * state.u[t][i])
        .sum();
    linear - mass
}

pub fn dual_objective(state: &DualState, obs: &ObservationModel, rho: &ObservationSeries) -> f64 {
    dual_objective_at(state, obs, rho, 0)
}

/// Dual objective plus the constant `μ̂ᵀA_0𝟙`, which makes it comparable
/// with the proximal-step primal objective.
pub fn shifted_dual_objective(
    state: &DualState,
    prior: &MarkovPrior,
    obs: &ObservationModel,
    rho: &ObservationSeries,
) -> f64 {
    let constant: f64 = if prior.horizon() == 0 {
        state.mu_hat.iter().sum()
    } else {
        prior
            .step(0)
            .row_sums()
            .iter()
            .zip(&state.mu_hat)
            .map(|(s, m)| s * m)
            .sum()
    };
    dual_objective(state, obs, rho) + constant
}

/// `max_i (u_0 ⊙ φ_0)_i − 1`: nonpositive when the scalings satisfy the
/// product constraint `diag(u_0)A_0 diag(u_1)⋯A_{T−1}u_T ≤ 𝟙`.
pub fn dual_constraint_gap(state: &DualState) -> f64 {
    state.u[0]
        .iter()
        .zip(&state.phi[0])
        .map(|(u, p)| u * p)
        .fold(f64::NEG_INFINITY, f64::max)
        - 1.0
}

/// `M_t = diag(φ̂_t ⊙ u_t) A_t diag(u_{t+1} ⊙ φ_{t+1})`, whatever the residual.
pub fn recover_primal_unchecked(state: &DualState, prior: &MarkovPrior) -> TransportPlan {
    let steps: Vec<NonNegMatrix> = (0..prior.horizon())
        .map(|t| {
            let left = hadamard(&state.phi_hat[t], &state.u[t]);
            let right = hadamard(&state.u[t + 1], &state.phi[t + 1]);
            prior
                .step(t)
                .scale(&left, &right)
                .expect("messages are finite and nonnegative")
        })
        .collect();
    TransportPlan::new(steps).expect("scaled prior steps share one shape")
}

/// As [`recover_primal_unchecked`], but only once the observation residual
/// is within `tol`.
pub fn recover_primal(
    state: &DualState,
    prior: &MarkovPrior,
    obs: &ObservationModel,
    rho: &ObservationSeries,
    tol: f64,
) -> Result<TransportPlan, SolverError> {
    let residual = observation_residual(state, obs, rho);
    if !(residual <= tol) {
        return Err(SolverError::NotConverged { residual, tol });
    }
    Ok(recover_primal_unchecked(state, prior))
}

/// `Σ_t D(M_t | diag(M_t𝟙)A_t)` for the plan the state encodes, without
/// materializing it.
pub(crate) fn plan_objective(state: &DualState, prior: &MarkovPrior) -> f64 {
    let mut total = 0.0;
    for t in 0..prior.horizon() {
        let (row_ptr, col_idx, values) = prior.step(t).csr();
        for i in 0..prior.n() {
            let p = state.phi_hat[t][i] * state.u[t][i];
            let phi = state.phi[t][i];
            let m = p * phi;
            if m == 0.0 {
                continue;
            }
            let mut row_mass = 0.0;
            let mut acc = 0.0;
            for k in row_ptr[i]..row_ptr[i + 1] {
                let j = col_idx[k];
                let q = state.u[t + 1][j] * state.phi[t + 1][j];
                row_mass += values[k];
                let entry = p * values[k] * q;
                if entry > 0.0 {
                    acc += entry * (q / phi).ln();
                }
            }
            // −M_ij + m_i a_ij summed over j
            total += acc - m + m * row_mass;
        }
    }
    total
}
