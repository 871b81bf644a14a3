//! Time-varying Markov priors for contaminant transport on pipe networks.
//!
//! Every pipe is cut into equal-volume segments no larger than the segment
//! cap. Source nodes with a tank contribute one state each, and one absorbing
//! `EXIT` state collects whatever leaves the network at consumers. Row `i` of
//! `A_t` is the distribution, after one step, of the water sitting in state
//! `i` at time `t`, computed with plug flow along every downstream path and
//! flow-proportional splitting at junctions.

mod line;
mod network;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{NonNegMatrix, TensorError};

pub use line::{
    line_split, line_transitions, line_transitions_to_sink, normalized_speed, LineSplit,
};
pub use network::{
    FlowSeries, NetworkModel, Node, NodeKind, PipeSpec, StateKind, DEFAULT_BALANCE_TOL,
    DEFAULT_SEGMENT_CAP_L,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("invalid volume {0} (must be > 0)")]
    InvalidVolume(f64),
    #[error("invalid flow {0} (must be >= 0)")]
    InvalidFlow(f64),
    #[error("invalid time step {0} (must be > 0)")]
    InvalidTimeStep(f64),
    #[error("invalid normalized speed {0}")]
    InvalidSpeed(f64),
    #[error("line hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("flow imbalance at node {node}, t={t}: inflow {inflow} vs outflow {outflow}")]
    FlowImbalance {
        node: String,
        t: usize,
        inflow: f64,
        outflow: f64,
    },
    #[error("invalid flow series: {0}")]
    InvalidFlows(String),
    #[error("at t={t}, state {state}: {source}")]
    AtState {
        t: usize,
        state: String,
        #[source]
        source: Box<PriorError>,
    },
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Sequence of `T` row-(sub)stochastic `n×n` transition matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovPrior {
    n: usize,
    steps: Vec<NonNegMatrix>,
}

/// Row sums may exceed one by at most this much.
const ROW_SUM_SLACK: f64 = 1e-9;

impl MarkovPrior {
    pub fn new(n: usize, steps: Vec<NonNegMatrix>) -> Result<Self, PriorError> {
        for (t, a) in steps.iter().enumerate() {
            if a.rows() != n || a.cols() != n {
                return Err(PriorError::InvalidPrior(format!(
                    "A_{t} is {}x{}, expected {n}x{n}",
                    a.rows(),
                    a.cols()
                )));
            }
            if let Some((i, s)) = a
                .row_sums()
                .iter()
                .enumerate()
                .find(|(_, s)| **s > 1.0 + ROW_SUM_SLACK)
            {
                return Err(PriorError::InvalidPrior(format!(
                    "row {i} of A_{t} sums to {s} > 1"
                )));
            }
        }
        Ok(Self { n, steps })
    }

    /// Time-invariant prior repeating `a` for `horizon` steps.
    pub fn stationary(a: NonNegMatrix, horizon: usize) -> Result<Self, PriorError> {
        let n = a.rows();
        Self::new(n, vec![a; horizon])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of transitions `T`; marginals are indexed `0..=T`.
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, t: usize) -> &NonNegMatrix {
        &self.steps[t]
    }

    pub fn steps(&self) -> &[NonNegMatrix] {
        &self.steps
    }

    /// Largest `|A_t 𝟙 − 𝟙|` over all rows and times.
    pub fn max_row_sum_defect(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|a| a.row_sums().into_vec())
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_stochastic(&self, tol: f64) -> bool {
        self.max_row_sum_defect() <= tol
    }
}

/// Walks every downstream path from `state` at time `t`, applies the line
/// transitions on each path, and mixes the results with the product of the
/// flow fractions taken at each bifurcation.
pub fn pipe_row(
    network: &NetworkModel,
    flows: &FlowSeries,
    t: usize,
    state: usize,
) -> Result<Vec<(usize, f64)>, PriorError> {
    let wrap = |e: PriorError| PriorError::AtState {
        t,
        state: network.state_id(state).to_string(),
        source: Box::new(e),
    };
    pipe_row_inner(network, flows, t, state).map_err(wrap)
}

fn pipe_row_inner(
    network: &NetworkModel,
    flows: &FlowSeries,
    t: usize,
    state: usize,
) -> Result<Vec<(usize, f64)>, PriorError> {
    if t >= flows.horizon() {
        return Err(PriorError::InvalidFlows(format!(
            "no flows at t={t} (horizon {})",
            flows.horizon()
        )));
    }
    let exit = network.exit_state();
    if state == exit {
        return Ok(vec![(exit, 1.0)]);
    }
    let s1 = network.speed(flows, t, state)?;
    if s1 == 0.0 {
        return Ok(vec![(state, 1.0)]);
    }

    let mut row: BTreeMap<usize, f64> = BTreeMap::new();
    let mut path = vec![state];
    let mut speeds = vec![s1];
    walk(
        network,
        flows,
        t,
        &mut path,
        &mut speeds,
        0.0,
        1.0,
        &mut row,
    )?;
    Ok(row.into_iter().filter(|(_, p)| *p > 0.0).collect())
}

/// Depth-first enumeration. `reach` is `Σ_{k≥2} 1/S_k` along the current
/// path; a path is complete once it exceeds one (the leading edge is
/// contained) or it reaches a sink.
#[allow(clippy::too_many_arguments)]
fn walk(
    network: &NetworkModel,
    flows: &FlowSeries,
    t: usize,
    path: &mut Vec<usize>,
    speeds: &mut Vec<f64>,
    reach: f64,
    weight: f64,
    row: &mut BTreeMap<usize, f64>,
) -> Result<(), PriorError> {
    if path.len() > 1 && reach > 1.0 + 1e-12 * (1.0 + reach) {
        let a = line_transitions(speeds)?;
        for (s, p) in path.iter().zip(a) {
            *row.entry(*s).or_insert(0.0) += weight * p;
        }
        return Ok(());
    }
    let here = *path.last().expect("path is never empty");
    let next = network.successors(flows, t, here)?;
    if next.is_empty() {
        return Err(PriorError::Topology(format!(
            "water leaves {} but has nowhere to go",
            network.state_id(here)
        )));
    }
    for (s, w) in next {
        if w <= 0.0 {
            continue;
        }
        let sink_like = s == network.exit_state() || network.speed(flows, t, s)? == 0.0;
        if sink_like {
            // unbounded residence: everything past this point stays there
            let a = line_transitions_to_sink(speeds)?;
            for (st, p) in path.iter().chain(std::iter::once(&s)).zip(a) {
                *row.entry(*st).or_insert(0.0) += weight * w * p;
            }
            continue;
        }
        if path.contains(&s) {
            return Err(PriorError::Topology(format!(
                "cycle through {} traversed within one step",
                network.state_id(s)
            )));
        }
        let sp = network.speed(flows, t, s)?;
        path.push(s);
        speeds.push(sp);
        walk(network, flows, t, path, speeds, reach + 1.0 / sp, weight * w, row)?;
        path.pop();
        speeds.pop();
    }
    Ok(())
}

/// Assembles `A_0, …, A_{T−1}` from [`pipe_row`], with the exit row fixed
/// to `e_exit`.
pub fn build_prior(network: &NetworkModel, flows: &FlowSeries) -> Result<MarkovPrior, PriorError> {
    let n = network.n_states();
    if flows.n_pipes() != network.pipes().len() {
        return Err(PriorError::InvalidFlows(format!(
            "flow series has {} pipes, network has {}",
            flows.n_pipes(),
            network.pipes().len()
        )));
    }
    let mut steps = Vec::with_capacity(flows.horizon());
    for t in 0..flows.horizon() {
        let mut triplets = Vec::new();
        for i in 0..n {
            for (j, p) in pipe_row(network, flows, t, i)? {
                triplets.push((i, j, p));
            }
        }
        steps.push(NonNegMatrix::from_triplets(n, n, triplets)?);
    }
    MarkovPrior::new(n, steps)
}
