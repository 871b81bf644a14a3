use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::prior::MarkovPrior;

use super::dual::{
    bca_sweep, dual_objective, observation_residual, pinned_start_sweep, plan_objective,
    recover_primal_unchecked, DualState,
};
use super::log_domain::LogDualState;
use super::plan::TransportPlan;
use super::support::{reduce_support, SupportReport};
use super::{check_dims, ObservationModel, ObservationSeries, SolverError, SweepStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerMode {
    /// Sweep until the observation residual is within tolerance.
    Exact,
    /// A fixed number of sweeps per proximal step.
    Sweeps(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EtaInit {
    /// Largest total reading spread evenly over the unobserved states.
    Uniform,
    Given(Vec<f64>),
    /// The uniform value times independent factors drawn from `[0.5, 1.5)`.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Stop once `‖η̂_new − η̂_old‖_∞` is at most this.
    pub outer_tol: f64,
    pub inner: InnerMode,
    pub max_outer_iters: usize,
    /// Cap on sweeps per step in [`InnerMode::Exact`].
    pub max_inner_sweeps: usize,
    /// Observation residual tolerance, relative to `max(1, max ρ)`.
    pub residual_tol: f64,
    /// In [`InnerMode::Sweeps`], extra sweeps are run until the residual is
    /// at most this times the change in `η̂`; infinity gives exactly `n`.
    pub inexact_ratio: f64,
    pub eta_init: EtaInit,
    pub domain: Domain,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_tol: 1e-8,
            inner: InnerMode::Sweeps(2),
            max_outer_iters: 200_000,
            max_inner_sweeps: 100_000,
            residual_tol: 1e-9,
            inexact_ratio: 0.1,
            eta_init: EtaInit::Uniform,
            domain: Domain::Linear,
        }
    }
}

impl SolverConfig {
    pub fn exact() -> Self {
        Self {
            inner: InnerMode::Exact,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidInput(m.into()));
        if !(self.outer_tol > 0.0) {
            return bad("outer_tol must be > 0");
        }
        if !(self.residual_tol > 0.0) {
            return bad("residual_tol must be > 0");
        }
        if !(self.inexact_ratio > 0.0) {
            return bad("inexact_ratio must be > 0");
        }
        if self.inner == InnerMode::Sweeps(0) {
            return bad("at least one inner sweep is needed");
        }
        if let EtaInit::Given(eta) = &self.eta_init {
            if eta.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return bad("eta_init must be strictly positive");
            }
        }
        Ok(())
    }

    /// Absolute residual tolerance for the given readings.
    pub fn residual_bound(&self, rho: &ObservationSeries) -> f64 {
        self.residual_tol * rho.max_entry().max(1.0)
    }

    fn initial_eta(&self, obs: &ObservationModel, rho: &ObservationSeries) -> Result<Vec<f64>, SolverError> {
        let m = obs.unobserved().len();
        match &self.eta_init {
            EtaInit::Uniform => Ok(default_eta(obs, rho)),
            EtaInit::Given(eta) => {
                if eta.len() != m {
                    return Err(SolverError::InvalidInput(format!(
                        "eta_init has {} entries for {m} unobserved states",
                        eta.len()
                    )));
                }
                Ok(eta.clone())
            }
            EtaInit::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(default_eta(obs, rho)
                    .into_iter()
                    .map(|v| v * rng.random_range(0.5..1.5))
                    .collect())
            }
        }
    }
}

/// `𝟙 · max_t(𝟙ᵀρ_t) / (n − k)`, or `𝟙` when nothing is ever observed.
pub fn default_eta(obs: &ObservationModel, rho: &ObservationSeries) -> Vec<f64> {
    let m = obs.unobserved().len();
    let total = rho.max_total();
    let v = if total > 0.0 { total / m as f64 } else { 1.0 };
    vec![v; m]
}

/// One row of the proximal trace.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub eta_change: f64,
    /// Objective of the plan recovered at this iteration.
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub residual: f64,
}

pub type Trace = Vec<TraceRow>;

enum Engine {
    Linear(DualState),
    Log(LogDualState),
}

impl Engine {
    fn new(domain: Domain, prior: &MarkovPrior, mu_hat: Vec<f64>) -> Result<Self, SolverError> {
        Ok(match domain {
            Domain::Linear => Engine::Linear(DualState::new(prior, mu_hat)?),
            Domain::Log => Engine::Log(LogDualState::new(prior, &mu_hat)?),
        })
    }

    fn set_mu_hat(&mut self, prior: &MarkovPrior, mu_hat: Vec<f64>) {
        match self {
            Engine::Linear(s) => s.set_mu_hat(prior, mu_hat),
            Engine::Log(s) => s.set_mu_hat(&mu_hat),
        }
    }

    fn sweep(
        &mut self,
        prior: &MarkovPrior,
        obs: &ObservationModel,
        rho: &ObservationSeries,
    ) -> Result<SweepStats, SolverError> {
        match self {
            Engine::Linear(s) => bca_sweep(s, prior, obs, rho),
            Engine::Log(s) => s.sweep(obs, rho),
        }
    }

    fn residual(&self, obs: &ObservationModel, rho: &ObservationSeries) -> f64 {
        match self {
            Engine::Linear(s) => observation_residual(s, obs, rho),
            Engine::Log(s) => s.residual(obs, rho),
        }
    }

    fn linear(&self) -> std::borrow::Cow<'_, DualState> {
        match self {
            Engine::Linear(s) => std::borrow::Cow::Borrowed(s),
            Engine::Log(s) => std::borrow::Cow::Owned(s.to_linear()),
        }
    }

    /// Runs the inner iteration for one proximal step; returns the residual
    /// and the number of sweeps.
    fn run(
        &mut self,
        prior: &MarkovPrior,
        obs: &ObservationModel,
        rho: &ObservationSeries,
        mode: InnerMode,
        max_sweeps: usize,
        bound: f64,
        dual_trace: &mut Vec<SweepStats>,
    ) -> Result<(f64, usize), SolverError> {
        match mode {
            InnerMode::Sweeps(n) => {
                let mut residual = f64::INFINITY;
                for _ in 0..n {
                    let s = self.sweep(prior, obs, rho)?;
                    residual = s.residual;
                    dual_trace.push(s);
                }
                Ok((residual, n))
            }
            InnerMode::Exact => {
                let mut residual = self.residual(obs, rho);
                let mut sweeps = 0;
                // one sweep even when already within tolerance, so a changed
                // μ̂ always gets a fresh update
                while sweeps == 0 || residual > bound {
                    if sweeps == max_sweeps {
                        return Err(SolverError::MaxItersExceeded {
                            iters: sweeps,
                            last_change: f64::NAN,
                            residual,
                            trace: Box::default(),
                        });
                    }
                    let s = self.sweep(prior, obs, rho)?;
                    residual = s.residual;
                    dual_trace.push(s);
                    sweeps += 1;
                }
                Ok((residual, sweeps))
            }
        }
    }
}

/// Result of [`inner_solve`].
#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub state: DualState,
    pub plan: TransportPlan,
    pub sweeps: usize,
    pub residual: f64,
    /// Statistics of every sweep, in order.
    pub sweep_stats: Vec<SweepStats>,
}

/// Solves one proximal step with fixed first-marginal prior `μ̂`.
pub fn inner_solve(
    prior: &MarkovPrior,
    obs: &ObservationModel,
    rho: &ObservationSeries,
    mu_hat: &[f64],
    config: &SolverConfig,
) -> Result<InnerOutcome, SolverError> {
    check_dims(prior, obs, rho)?;
    config.validate()?;
    let mut engine = Engine::new(config.domain, prior, mu_hat.to_vec())?;
    let mut stats = Vec::new();
    let bound = config.residual_bound(rho);
    let (residual, sweeps) =
        engine.run(prior, obs, rho, config.inner, config.max_inner_sweeps, bound, &mut stats)?;
    let state = engine.linear().into_owned();
    let plan = recover_primal_unchecked(&state, prior);
    Ok(InnerOutcome {
        state,
        plan,
        sweeps,
        residual,
        sweep_stats: stats,
    })
}

/// Result of [`proximal_solve`].
#[derive(Debug, Clone)]
pub struct ProximalOutcome {
    pub plan: TransportPlan,
    /// `C̄ M_0 𝟙` of the returned plan.
    pub eta: Vec<f64>,
    pub trace: Trace,
    pub state: DualState,
    pub residual: f64,
    pub objective: f64,
    pub support: SupportReport,
    pub total_sweeps: usize,
}

impl ProximalOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// Entropic proximal iteration on the unobserved initial mass `η̂`:
/// solve the step with `μ̂ = Cᵀρ_0 + C̄ᵀη̂`, then set `η̂ ← C̄M_0𝟙`.
///
/// Stops when `η̂` moves by at most `outer_tol` and the observation residual
/// is within tolerance.
pub fn proximal_solve(
    prior: &MarkovPrior,
    obs: &ObservationModel,
    rho: &ObservationSeries,
    config: &SolverConfig,
) -> Result<ProximalOutcome, SolverError> {
    let mut solver = ProximalSolver::new(prior, obs, rho, config)?;
    while solver.iterations() < config.max_outer_iters {
        solver.step()?;
        if solver.converged() {
            let out = solver.finish();
            info!(
                "converged after {} outer iterations ({} sweeps)",
                out.iterations(),
                out.total_sweeps
            );
            return Ok(out);
        }
    }
    let (last_change, residual) = solver
        .trace
        .last()
        .map_or((f64::INFINITY, f64::INFINITY), |r| (r.eta_change, r.residual));
    Err(SolverError::MaxItersExceeded {
        iters: config.max_outer_iters,
        last_change,
        residual,
        trace: Box::new(solver.trace),
    })
}

/// The iteration behind [`proximal_solve`], one outer step at a time.
pub struct ProximalSolver<'a> {
    prior: &'a MarkovPrior,
    obs: &'a ObservationModel,
    rho: &'a ObservationSeries,
    config: &'a SolverConfig,
    engine: Engine,
    eta: Vec<f64>,
    bound: f64,
    support: SupportReport,
    trace: Trace,
    total_sweeps: usize,
}

impl<'a> ProximalSolver<'a> {
    pub fn new(
        prior: &'a MarkovPrior,
        obs: &'a ObservationModel,
        rho: &'a ObservationSeries,
        config: &'a SolverConfig,
    ) -> Result<Self, SolverError> {
        check_dims(prior, obs, rho)?;
        config.validate()?;
        if prior.horizon() == 0 {
            return Err(SolverError::InvalidInput("the horizon must be at least one step".into()));
        }
        let (_, support) = reduce_support(prior, obs, rho)?;
        let eta = config.initial_eta(obs, rho)?;
        let engine = Engine::new(config.domain, prior, obs.embed(rho.at(0), &eta))?;
        Ok(Self {
            prior,
            obs,
            rho,
            config,
            engine,
            eta,
            bound: config.residual_bound(rho),
            support,
            trace: Trace::new(),
            total_sweeps: 0,
        })
    }

    /// Current `η̂`.
    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    /// Runs one proximal step and returns its trace row.
    pub fn step(&mut self) -> Result<TraceRow, SolverError> {
        let (prior, obs, rho) = (self.prior, self.obs, self.rho);
        if !self.trace.is_empty() {
            self.engine.set_mu_hat(prior, obs.embed(rho.at(0), &self.eta));
        }
        let mut stats = Vec::new();
        let (mut residual, mut sweeps) =
            match self.engine.run(
                prior,
                obs,
                rho,
                self.config.inner,
                self.config.max_inner_sweeps,
                self.bound,
                &mut stats,
            ) {
                Err(SolverError::MaxItersExceeded { iters, residual, .. }) => {
                    return Err(SolverError::MaxItersExceeded {
                        iters,
                        last_change: self.trace.last().map_or(f64::INFINITY, |r| r.eta_change),
                        residual,
                        trace: Box::new(self.trace.clone()),
                    })
                }
                other => other?,
            };
        // Sweeps(n): keep sweeping past n while the step is still too inexact
        // relative to the progress it makes
        let (eta_new, change) = loop {
            let eta_new = self.next_eta();
            let change = eta_new
                .iter()
                .zip(&self.eta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let done = residual <= self.bound.max(self.config.inexact_ratio * change);
            if done || self.config.inner == InnerMode::Exact || sweeps >= self.config.max_inner_sweeps {
                break (eta_new, change);
            }
            let s = self.engine.sweep(prior, obs, rho)?;
            residual = s.residual;
            sweeps += 1;
        };
        self.total_sweeps += sweeps;
        let state = self.engine.linear();
        let row = TraceRow {
            iter: self.trace.len() + 1,
            eta_change: change,
            primal_obj: plan_objective(&state, prior),
            dual_obj: dual_objective(&state, obs, rho),
            residual,
        };
        debug!(
            "iter {}: change {change:.3e} primal {:.6e} residual {residual:.3e}",
            row.iter, row.primal_obj
        );
        self.trace.push(row);
        self.eta = eta_new;
        Ok(row)
    }

    /// `C̄(μ̂ ⊙ φ_0)`, the unobserved part of the current plan's first marginal.
    fn next_eta(&self) -> Vec<f64> {
        let state = self.engine.linear();
        self.obs
            .unobserved()
            .iter()
            .map(|&i| state.mu_hat()[i] * state.phi(0)[i])
            .collect()
    }

    /// Whether the last step met both stopping tolerances.
    pub fn converged(&self) -> bool {
        self.trace
            .last()
            .is_some_and(|r| r.eta_change <= self.config.outer_tol && r.residual <= self.bound)
    }

    /// Plan and scalings of the last step.
    pub fn finish(self) -> ProximalOutcome {
        let state = self.engine.linear().into_owned();
        let plan = recover_primal_unchecked(&state, self.prior);
        let last = self.trace.last().copied();
        ProximalOutcome {
            plan,
            eta: self.eta,
            objective: last.map_or(f64::NAN, |r| r.primal_obj),
            residual: last.map_or(f64::INFINITY, |r| r.residual),
            trace: self.trace,
            state,
            support: self.support,
            total_sweeps: self.total_sweeps,
        }
    }
}

/// `f(η)`: the smallest objective over plans that start from
/// `μ_0 = Cᵀρ_0 + C̄ᵀη` and match every reading, solved to the configured
/// residual tolerance.
pub fn objective_at(
    prior: &MarkovPrior,
    obs: &ObservationModel,
    rho: &ObservationSeries,
    eta: &[f64],
    config: &SolverConfig,
) -> Result<f64, SolverError> {
    check_dims(prior, obs, rho)?;
    if eta.len() != obs.unobserved().len() || eta.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(SolverError::InvalidInput(
            "eta needs one finite nonnegative entry per unobserved state".into(),
        ));
    }
    let mut state = DualState::new(prior, obs.embed(rho.at(0), eta))?;
    let bound = config.residual_bound(rho);
    for _ in 0..config.max_inner_sweeps {
        let s = pinned_start_sweep(&mut state, prior, obs, rho)?;
        if s.residual <= bound {
            return Ok(plan_objective(&state, prior));
        }
    }
    Err(SolverError::NotConverged {
        residual: observation_residual(&state, obs, rho),
        tol: bound,
    })
}
