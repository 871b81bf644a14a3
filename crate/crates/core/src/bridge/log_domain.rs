//! Log-space variant of the dual iteration, for instances whose scalings
//! or messages leave the range of `f64`.

use crate::prior::MarkovPrior;
use crate::tensor::NonNegMatrix;

use super::dual::DualState;
use super::{ObservationModel, ObservationSeries, SolverError, SweepStats};

/// Log-weights of a sparse matrix in CSR layout.
#[derive(Debug, Clone, PartialEq)]
struct LogCsr {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    log_values: Vec<f64>,
}

impl LogCsr {
    fn new(a: &NonNegMatrix) -> Self {
        let (row_ptr, col_idx, values) = a.csr();
        Self {
            row_ptr: row_ptr.to_vec(),
            col_idx: col_idx.to_vec(),
            log_values: values.iter().map(|v| v.ln()).collect(),
        }
    }

    /// `y_i = log Σ_j exp(log a_ij + x_j)`
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let range = self.row_ptr[i]..self.row_ptr[i + 1];
            let terms = || {
                self.col_idx[range.clone()]
                    .iter()
                    .zip(&self.log_values[range.clone()])
                    .map(|(j, l)| l + x[*j])
            };
            let m = terms().fold(f64::NEG_INFINITY, f64::max);
            *yi = if m == f64::NEG_INFINITY {
                m
            } else {
                m + terms().map(|v| (v - m).exp()).sum::<f64>().ln()
            };
        }
    }
}

/// [`DualState`] with every vector stored as its logarithm.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDualState {
    log_u: Vec<Vec<f64>>,
    log_phi_hat: Vec<Vec<f64>>,
    log_phi: Vec<Vec<f64>>,
    log_mu_hat: Vec<f64>,
    backward: Vec<LogCsr>,
    forward: Vec<LogCsr>,
}

fn ln_all(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.ln()).collect()
}

impl LogDualState {
    pub fn new(prior: &MarkovPrior, mu_hat: &[f64]) -> Result<Self, SolverError> {
        let n = prior.n();
        if mu_hat.len() != n || mu_hat.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SolverError::InvalidInput(
                "mu_hat must have one finite nonnegative entry per state".into(),
            ));
        }
        let horizon = prior.horizon();
        let mut st = Self {
            log_u: vec![vec![0.0; n]; horizon + 1],
            log_phi_hat: vec![vec![f64::NEG_INFINITY; n]; horizon + 1],
            log_phi: vec![vec![0.0; n]; horizon + 1],
            log_mu_hat: ln_all(mu_hat),
            backward: prior.steps().iter().map(LogCsr::new).collect(),
            forward: prior.steps().iter().map(|a| LogCsr::new(&a.transpose())).collect(),
        };
        st.forward_pass();
        st.backward_pass();
        Ok(st)
    }

    pub fn horizon(&self) -> usize {
        self.log_u.len() - 1
    }

    pub fn log_u(&self, t: usize) -> &[f64] {
        &self.log_u[t]
    }

    pub fn set_mu_hat(&mut self, mu_hat: &[f64]) {
        self.log_mu_hat = ln_all(mu_hat);
        self.forward_pass();
    }

    fn forward_pass(&mut self) {
        self.log_phi_hat[0].clone_from(&self.log_mu_hat);
        for t in 0..self.horizon() {
            self.push_forward(t);
        }
    }

    fn push_forward(&mut self, t: usize) {
        let x: Vec<f64> = self.log_phi_hat[t]
            .iter()
            .zip(&self.log_u[t])
            .map(|(a, b)| a + b)
            .collect();
        self.forward[t].apply(&x, &mut self.log_phi_hat[t + 1]);
    }

    fn backward_pass(&mut self) {
        for t in (0..self.horizon()).rev() {
            let x: Vec<f64> = self.log_phi[t + 1]
                .iter()
                .zip(&self.log_u[t + 1])
                .map(|(a, b)| a + b)
                .collect();
            self.backward[t].apply(&x, &mut self.log_phi[t]);
        }
    }

    /// Same update order as [`super::bca_sweep`], carried out on logarithms.
    pub fn sweep(
        &mut self,
        obs: &ObservationModel,
        rho: &ObservationSeries,
    ) -> Result<SweepStats, SolverError> {
        let mut mismatch: f64 = 0.0;
        for t in 0..=self.horizon() {
            let r = rho.at(t);
            for (j, &s) in obs.sensors().iter().enumerate() {
                let d = self.log_phi[t][s] + self.log_phi_hat[t][s];
                self.log_u[t][s] = if r[j] == 0.0 {
                    f64::NEG_INFINITY
                } else if d == f64::NEG_INFINITY || d.is_nan() {
                    return Err(SolverError::DegenerateUpdate {
                        t,
                        sensor: j,
                        demand: r[j],
                    });
                } else {
                    r[j].ln() - d
                };
                if r[j] > 0.0 {
                    let got = (d + self.log_u[t][s]).exp();
                    mismatch = mismatch.max((got - r[j]).abs() / r[j]);
                }
            }
            if t < self.horizon() {
                self.push_forward(t);
            }
        }
        self.backward_pass();
        Ok(SweepStats {
            post_update_mismatch: mismatch,
            residual: self.residual(obs, rho),
            dual_objective: self.dual_objective(obs, rho),
        })
    }

    pub fn residual(&self, obs: &ObservationModel, rho: &ObservationSeries) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 0..=self.horizon() {
            for (j, &s) in obs.sensors().iter().enumerate() {
                let got = (self.log_phi[t][s] + self.log_u[t][s] + self.log_phi_hat[t][s]).exp();
                worst = worst.max((got - rho.at(t)[j]).abs());
            }
        }
        worst
    }

    pub fn dual_objective(&self, obs: &ObservationModel, rho: &ObservationSeries) -> f64 {
        let mut linear = 0.0;
        for t in 0..=self.horizon() {
            for (j, &s) in obs.sensors().iter().enumerate() {
                let r = rho.at(t)[j];
                if r > 0.0 {
                    linear += self.log_u[t][s] * r;
                }
            }
        }
        let mass: f64 = (0..self.log_mu_hat.len())
            .map(|i| (self.log_phi[0][i] + self.log_phi_hat[0][i] + self.log_u[0][i]).exp())
            .sum();
        linear - mass
    }

    /// Exponentiates everything into a linear-domain state.
    pub fn to_linear(&self) -> DualState {
        let exp_all = |vs: &[Vec<f64>]| -> Vec<Vec<f64>> {
            vs.iter().map(|v| v.iter().map(|x| x.exp()).collect()).collect()
        };
        DualState::from_parts(
            exp_all(&self.log_u),
            exp_all(&self.log_phi_hat),
            exp_all(&self.log_phi),
            self.log_mu_hat.iter().map(|x| x.exp()).collect(),
        )
    }
}
