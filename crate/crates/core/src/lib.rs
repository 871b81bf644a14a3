//! Reconstruction of transported mass from partial sensor readings.
//!
//! A Markov prior describes how mass is expected to move between `n` states
//! over `T` steps; sensors report the mass at `k` of those states at every
//! step. The solver finds the transport plans closest to the prior (in
//! normalized KL divergence) that reproduce every reading, and the
//! observability tools tell whether the reconstruction is unique.

pub mod bridge;
pub mod io;
pub mod observability;
pub mod prior;
pub mod sim;
pub mod tensor;

pub use bridge::{
    proximal_solve, DualState, ObservationModel, ObservationSeries, SolverConfig, SolverError,
    TransportPlan,
};
pub use io::IoError;
pub use observability::{ObservabilityError, ObservabilityReport};
pub use prior::{build_prior, FlowSeries, MarkovPrior, NetworkModel, PriorError};
pub use sim::{Scenario, SimError};
pub use tensor::{kl_divergence, NonNegMatrix, NonNegVector, TensorError};

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Observability(#[from] ObservabilityError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] IoError),
}
