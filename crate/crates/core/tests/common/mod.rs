//! Instance generators and independent reference implementations shared by
//! the integration tests.
#![allow(dead_code)]

use pbridge_core::bridge::{ObservationModel, ObservationSeries};
use pbridge_core::observability::{analyze, observability_matrix};
use pbridge_core::prior::{build_prior, FlowSeries, MarkovPrior, NetworkModel};
use pbridge_core::sim::{propagate, random, Scenario};
use pbridge_core::NonNegVector;
use rand::seq::SliceRandom;
use rand::Rng;

/// Prior-consistent instance on a random sparse stochastic prior.
pub struct Instance {
    pub prior: MarkovPrior,
    pub obs: ObservationModel,
    pub rho: ObservationSeries,
    pub mu0: NonNegVector,
}

pub fn random_instance(rng: &mut impl Rng, n: usize, horizon: usize, k: usize) -> Instance {
    let prior = random::stochastic_prior(n, horizon, rng).unwrap();
    let mut states: Vec<usize> = (0..n).collect();
    states.shuffle(rng);
    states.truncate(k);
    let obs = ObservationModel::new(n, states).unwrap();
    let mu0 = NonNegVector::new((0..n).map(|_| 0.2 + rng.random::<f64>()).collect()).unwrap();
    let scenario = Scenario::new(prior.clone(), mu0.clone(), obs.clone(), None).unwrap();
    let (_, rho) = propagate(&scenario);
    Instance { prior, obs, rho, mu0 }
}

/// Random line or branch network whose sensors make the initial mass
/// uniquely and stably recoverable: `EXIT` plus about a third of the
/// segments, kept only if the observability matrix has full column rank
/// with `σ_min/σ_max ≥ 1e-3`.
pub struct NetworkInstance {
    pub net: NetworkModel,
    pub flows: FlowSeries,
    pub scenario: Scenario,
    pub rho: ObservationSeries,
}

pub fn observable_network_instance(
    rng: &mut impl Rng,
    max_states: usize,
    max_horizon: usize,
) -> NetworkInstance {
    loop {
        let branch = rng.random::<bool>();
        let spec = random::NetworkSpec {
            pipes: rng.random_range(if branch { 3..9 } else { 2..9 }),
            branch,
            horizon: rng.random_range(5..=max_horizon),
            dt: 1.0,
        };
        let (net, flows) = random::network(&spec, rng).unwrap();
        if net.n_states() > max_states {
            continue;
        }
        let prior = build_prior(&net, &flows).unwrap();
        let segments = random::segment_states(&net);
        let mut sensors = vec![net.exit_state()];
        for _ in 0..net.n_states().div_ceil(3) {
            let s = segments[rng.random_range(0..segments.len())];
            if !sensors.contains(&s) {
                sensors.push(s);
            }
        }
        let obs = ObservationModel::new(net.n_states(), sensors).unwrap();
        if !analyze(&prior, &obs, None).unwrap().is_unique {
            continue;
        }
        let sv = observability_matrix(&prior, &obs).singular_values();
        if sv.min() < 1e-3 * sv.max() {
            continue;
        }
        let mu0 = random::initial_mass(&net, rng);
        let scenario = Scenario::new(prior, mu0, obs, None).unwrap();
        let (_, rho) = propagate(&scenario);
        return NetworkInstance {
            net,
            flows,
            scenario,
            rho,
        };
    }
}

/// Brute-force plug-flow transport along a line: pipe 1's water is cut into
/// `slugs` equal slugs, each slug's midpoint is advanced by one time unit
/// (pipe `k` takes `1/S_k` to traverse) and the destination pipes are
/// tallied. With `sink`, water leaving the last pipe goes to an extra bin.
pub fn slug_oracle(speeds: &[f64], sink: bool, slugs: usize) -> Vec<f64> {
    let mut bins = vec![0.0; speeds.len() + usize::from(sink)];
    if speeds[0] == 0.0 {
        bins[0] = 1.0;
        return bins;
    }
    // pipe boundaries in travel time from the inlet of pipe 1
    let mut ends = Vec::with_capacity(speeds.len());
    let mut acc = 0.0;
    for s in speeds {
        acc += 1.0 / s;
        ends.push(acc);
    }
    let len1 = 1.0 / speeds[0];
    for m in 0..slugs {
        let x = len1 * (m as f64 + 0.5) / slugs as f64 + 1.0;
        let pipe = ends.iter().position(|e| x < *e);
        match pipe {
            Some(p) => bins[p] += 1.0,
            None if sink => *bins.last_mut().unwrap() += 1.0,
            None => panic!("slug left a line without sink"),
        }
    }
    bins.iter().map(|b| b / slugs as f64).collect()
}

/// Multimarginal Sinkhorn on the full path tensor
/// `K(i_0, …, i_T) = μ̂_{i_0} Π_t A_t(i_t, i_{t+1})`, scaling every time
/// marginal to `ρ_t` in turn. Returns the dense two-time marginals `M_t`.
pub fn tensor_sinkhorn(
    prior: &MarkovPrior,
    mu_hat: &[f64],
    rho: &ObservationSeries,
    iters: usize,
) -> Vec<Vec<Vec<f64>>> {
    let n = prior.n();
    let horizon = prior.horizon();
    let dense: Vec<Vec<Vec<f64>>> = prior.steps().iter().map(|a| a.to_dense()).collect();
    let total = n.pow(horizon as u32 + 1);
    let index = |mut p: usize| -> Vec<usize> {
        let mut idx = vec![0; horizon + 1];
        for slot in idx.iter_mut().rev() {
            *slot = p % n;
            p /= n;
        }
        idx
    };
    let paths: Vec<Vec<usize>> = (0..total).map(index).collect();
    let kernel: Vec<f64> = paths
        .iter()
        .map(|idx| {
            let mut v = mu_hat[idx[0]];
            for t in 0..horizon {
                v *= dense[t][idx[t]][idx[t + 1]];
            }
            v
        })
        .collect();
    let mut scale = vec![vec![1.0; n]; horizon + 1];
    let weight = |scale: &[Vec<f64>], p: usize| -> f64 {
        let idx = &paths[p];
        kernel[p] * (0..=horizon).map(|t| scale[t][idx[t]]).product::<f64>()
    };
    for _ in 0..iters {
        for t in 0..=horizon {
            let mut marg = vec![0.0; n];
            for p in 0..total {
                marg[paths[p][t]] += weight(&scale, p);
            }
            for i in 0..n {
                if marg[i] > 0.0 {
                    scale[t][i] *= rho.at(t)[i] / marg[i];
                }
            }
        }
    }
    let mut plans = vec![vec![vec![0.0; n]; n]; horizon];
    for p in 0..total {
        let w = weight(&scale, p);
        let idx = &paths[p];
        for t in 0..horizon {
            plans[t][idx[t]][idx[t + 1]] += w;
        }
    }
    plans
}

/// Rank by Gaussian elimination with partial pivoting.
pub fn gauss_rank(mut m: Vec<Vec<f64>>, tol: f64) -> usize {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..rows)
            .filter(|&r| m[r][c].abs() > tol)
            .max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))
        else {
            continue;
        };
        m.swap(rank, p);
        for r in 0..rows {
            if r != rank {
                let f = m[r][c] / m[rank][c];
                for k in c..cols {
                    m[r][k] -= f * m[rank][k];
                }
            }
        }
        rank += 1;
    }
    rank
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
