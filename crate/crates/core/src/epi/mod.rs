//! Spatial two-group SEIRS epidemic model: the high-fidelity simulator whose
//! runs train the surrogate.

pub mod field;
pub mod grid;
pub mod ode;
pub mod params;
pub mod snapshot;
pub mod solver;
pub mod transport;

use std::path::Path;

use thiserror::Error;

use crate::container::ContainerError;

pub use field::{field_index, make_initial_field, slot_index, StateField, N_FIELDS};
pub use grid::{Grid, HOME_REGION};
pub use ode::seirs_ode_rhs;
pub use params::{r0_to_beta, Compartment, EpiParams, Group, T_DAY};
pub use snapshot::{SnapshotHeader, Snapshots};
pub use solver::{ext_seirs_step, run_simulation, Simulator, SolverConfig, StepReport, Trajectory};
pub use transport::{InteractionSchedule, TransportParams};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("Picard iteration did not converge at t = {time} s after {iterations} iterations (relative update {residual:e})")]
    PicardDiverged {
        time: f64,
        iterations: usize,
        residual: f64,
    },
    #[error("Gauss-Seidel stalled at t = {time} s after {sweeps} sweeps (relative residual {residual:e})")]
    LinearSolve {
        time: f64,
        sweeps: usize,
        residual: f64,
    },
    #[error("negative value {value:e} in slot {slot} at t = {time} s")]
    Negative { slot: usize, value: f64, time: f64 },
    #[error("bad snapshot file: {0}")]
    Format(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
