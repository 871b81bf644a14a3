//! Forward transport of a known initial mass through a prior, and synthetic
//! scenarios built from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{ObservationModel, ObservationSeries, SolverError};
use crate::prior::{
    build_prior, FlowSeries, MarkovPrior, NetworkModel, Node, PipeSpec, PriorError, StateKind,
};
use crate::tensor::{NonNegVector, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown injection state {id:?}; valid ids: {}", valid.join(", "))]
    UnknownState { id: String, valid: Vec<String> },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Multiplicative sensor noise `ρ ↦ max(0, ρ(1 + σξ))`, `ξ ~ N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub prior: MarkovPrior,
    pub mu0: NonNegVector,
    pub obs: ObservationModel,
    pub injected_total: f64,
    pub noise: Option<NoiseSpec>,
}

impl Scenario {
    pub fn new(
        prior: MarkovPrior,
        mu0: NonNegVector,
        obs: ObservationModel,
        noise: Option<NoiseSpec>,
    ) -> Result<Self, SimError> {
        if mu0.len() != prior.n() || obs.n() != prior.n() {
            return Err(SimError::Invalid(format!(
                "prior has {} states, mu0 {}, observation model {}",
                prior.n(),
                mu0.len(),
                obs.n()
            )));
        }
        if let Some(ns) = noise {
            if !(ns.sigma >= 0.0 && ns.sigma.is_finite()) {
                return Err(SimError::Invalid(format!("noise level {}", ns.sigma)));
            }
        }
        Ok(Self {
            injected_total: mu0.sum(),
            prior,
            mu0,
            obs,
            noise,
        })
    }

    /// Readings with the scenario's noise applied, if any.
    pub fn observe(&self) -> ObservationSeries {
        let (_, rho) = propagate(self);
        match self.noise {
            Some(ns) if ns.sigma > 0.0 => add_noise(&rho, ns),
            _ => rho,
        }
    }
}

/// `μ_{t+1} = A_tᵀμ_t` and `ρ_t = Cμ_t`, noiselessly.
pub fn propagate(scenario: &Scenario) -> (Vec<NonNegVector>, ObservationSeries) {
    let prior = &scenario.prior;
    let mut marginals = Vec::with_capacity(prior.horizon() + 1);
    marginals.push(scenario.mu0.clone());
    for a in prior.steps() {
        let next = a.tr_mul_vec(marginals.last().expect("nonempty").as_slice());
        marginals.push(NonNegVector::new(next).expect("products of nonnegatives"));
    }
    let rho = marginals
        .iter()
        .map(|mu| NonNegVector::new(scenario.obs.select(mu.as_slice())).expect("selection"))
        .collect();
    (marginals, ObservationSeries::new(rho).expect("equal lengths"))
}

pub fn add_noise(rho: &ObservationSeries, noise: NoiseSpec) -> ObservationSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rows = rho
        .iter()
        .map(|r| {
            r.iter()
                .map(|v| (v * (1.0 + noise.sigma * normal.sample(&mut rng))).max(0.0))
                .collect()
        })
        .collect();
    ObservationSeries::from_rows(rows).expect("clipped at zero")
}

/// Mass released at `t = 0`, spread over `states` in proportion to their
/// volume (evenly if any of them has none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub states: Vec<String>,
    pub grams: f64,
}

impl Injection {
    /// All segments of one pipe.
    pub fn pipe(network: &NetworkModel, pipe_id: &str, grams: f64) -> Result<Self, SimError> {
        let p = network.pipe(pipe_id).ok_or_else(|| SimError::UnknownState {
            id: pipe_id.to_string(),
            valid: network.pipes().iter().map(|p| p.id.clone()).collect(),
        })?;
        Ok(Self {
            states: network
                .pipe_segments(p)
                .map(|s| network.state_id(s).to_string())
                .collect(),
            grams,
        })
    }

    pub fn initial_mass(&self, network: &NetworkModel) -> Result<NonNegVector, SimError> {
        if !(self.grams >= 0.0 && self.grams.is_finite()) {
            return Err(SimError::Invalid(format!("injected mass {}", self.grams)));
        }
        if self.states.is_empty() {
            return Err(SimError::Invalid("injection needs at least one state".into()));
        }
        let mut idx = Vec::with_capacity(self.states.len());
        for id in &self.states {
            let s = network.state(id).ok_or_else(|| SimError::UnknownState {
                id: id.clone(),
                valid: network.state_ids().to_vec(),
            })?;
            if idx.contains(&s) {
                return Err(SimError::Invalid(format!("state {id} listed twice")));
            }
            idx.push(s);
        }
        let volumes: Option<Vec<f64>> = idx.iter().map(|s| network.state_volume_l(*s)).collect();
        let weights = volumes.unwrap_or_else(|| vec![1.0; idx.len()]);
        let total: f64 = weights.iter().sum();
        let mut mu0 = vec![0.0; network.n_states()];
        for (s, w) in idx.iter().zip(&weights) {
            mu0[*s] = self.grams * w / total;
        }
        Ok(NonNegVector::new(mu0)?)
    }
}

/// Prior from the network, injected mass and the network's sensors.
pub fn make_scenario(
    network: &NetworkModel,
    flows: &FlowSeries,
    injection: &Injection,
    noise: Option<NoiseSpec>,
) -> Result<(Scenario, ObservationSeries), SimError> {
    let prior = build_prior(network, flows)?;
    let mu0 = injection.initial_mass(network)?;
    let obs = ObservationModel::new(network.n_states(), network.sensors().to_vec())?;
    let scenario = Scenario::new(prior, mu0, obs, noise)?;
    let rho = scenario.observe();
    Ok((scenario, rho))
}

/// Random pipe networks for tests and benchmarks.
pub mod random {
    use super::*;

    /// A line `S → … → C` of `pipes` pipes, or with `branch` set, a trunk
    /// that splits at a junction into two lines.
    #[derive(Debug, Clone)]
    pub struct NetworkSpec {
        pub pipes: usize,
        pub branch: bool,
        pub horizon: usize,
        pub dt: f64,
    }

    /// Builds the network and time-varying flows; pipe volumes lie in
    /// `[0.5, 3]` L and every segment is flushed by at most 90 % per step.
    pub fn network(
        spec: &NetworkSpec,
        rng: &mut impl Rng,
    ) -> Result<(NetworkModel, FlowSeries), SimError> {
        if spec.pipes == 0 || (spec.branch && spec.pipes < 3) {
            return Err(SimError::Invalid(format!("{} pipes is too few", spec.pipes)));
        }
        let cap = 1.5;
        let mut nodes = vec![Node::source("S")];
        let mut pipes = Vec::new();
        let mut volumes = Vec::new();
        let mut pipe = |from: &str, to: &str, pipes: &mut Vec<PipeSpec>, rng: &mut dyn FnMut() -> f64| {
            let v = 0.5 + 2.5 * rng();
            volumes.push(v);
            let id = format!("p{}", pipes.len() + 1);
            pipes.push(PipeSpec::new(&id, from, to, 1.0, NetworkModel::diameter_for_volume(v, 1.0)));
        };
        let mut draw = || rng.random::<f64>();
        let (trunk, left) = if spec.branch {
            let trunk = 1 + (spec.pipes - 3) / 3;
            let left = (spec.pipes - trunk) / 2;
            (trunk, left)
        } else {
            (spec.pipes, 0)
        };
        let mut last = "S".to_string();
        for i in 0..trunk {
            let to = if i + 1 == trunk && !spec.branch {
                "C".to_string()
            } else {
                format!("J{i}")
            };
            pipe(&last, &to, &mut pipes, &mut draw);
            last = to;
        }
        let split_node = last.clone();
        let mut arms = Vec::new();
        if spec.branch {
            let right = spec.pipes - trunk - left;
            for (arm, len) in [("L", left), ("R", right)] {
                let mut at = split_node.clone();
                for i in 0..len {
                    let to = if i + 1 == len {
                        format!("C{arm}")
                    } else {
                        format!("{arm}{i}")
                    };
                    pipe(&at, &to, &mut pipes, &mut draw);
                    at = to;
                }
                arms.push(len);
            }
        }
        for p in &pipes {
            if p.to_node.starts_with('C') {
                nodes.push(Node::consumer(&p.to_node));
            } else if !nodes.iter().any(|n| n.id == p.to_node) {
                nodes.push(Node::junction(&p.to_node));
            }
        }
        let net = NetworkModel::new(nodes, pipes, cap, vec![])?;

        let min_seg = |p: usize| {
            let segs = net.pipe_segments(p).len() as f64;
            volumes[p] / segs
        };
        let mut rows = Vec::with_capacity(spec.horizon);
        for _ in 0..spec.horizon {
            let frac = if spec.branch { 0.2 + 0.6 * rng.random::<f64>() } else { 1.0 };
            let share = |p: usize| {
                if p < trunk {
                    1.0
                } else if p < trunk + arms[0] {
                    frac
                } else {
                    1.0 - frac
                }
            };
            // largest total flow keeping every speed below 0.9
            let limit = (0..net.pipes().len())
                .map(|p| 0.9 * min_seg(p) / (share(p) * spec.dt))
                .fold(f64::INFINITY, f64::min);
            let total = limit * (0.2 + 0.8 * rng.random::<f64>());
            rows.push((0..net.pipes().len()).map(|p| total * share(p)).collect());
        }
        let flows = FlowSeries::new(&net, spec.dt, rows)?;
        Ok((net, flows))
    }

    /// Segment states of the network, excluding tanks and `EXIT`.
    pub fn segment_states(net: &NetworkModel) -> Vec<usize> {
        (0..net.n_states())
            .filter(|s| matches!(net.state_kind(*s), StateKind::Segment { .. }))
            .collect()
    }

    /// Random initial mass on every segment, zero on `EXIT`.
    pub fn initial_mass(net: &NetworkModel, rng: &mut impl Rng) -> NonNegVector {
        let mut mu0 = vec![0.0; net.n_states()];
        for s in segment_states(net) {
            mu0[s] = 0.5 + rng.random::<f64>();
        }
        NonNegVector::new(mu0).expect("positive entries")
    }

    /// Random sparse row-stochastic prior: each row has one to three
    /// successors, always including itself.
    pub fn stochastic_prior(
        n: usize,
        horizon: usize,
        rng: &mut impl Rng,
    ) -> Result<MarkovPrior, SimError> {
        let mut steps = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let mut triplets = Vec::new();
            for i in 0..n {
                let mut cols = vec![i];
                for _ in 0..rng.random_range(0..3) {
                    let j = rng.random_range(0..n);
                    if !cols.contains(&j) {
                        cols.push(j);
                    }
                }
                let w: Vec<f64> = cols.iter().map(|_| 0.1 + rng.random::<f64>()).collect();
                let s: f64 = w.iter().sum();
                triplets.extend(cols.iter().zip(&w).map(|(j, v)| (i, *j, v / s)));
            }
            steps.push(crate::tensor::NonNegMatrix::from_triplets(n, n, triplets)?);
        }
        Ok(MarkovPrior::new(n, steps)?)
    }
}
