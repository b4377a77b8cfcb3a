use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::field::{slot_index, StateField, N_FIELDS};
use super::grid::Grid;
use super::params::{Compartment, EpiParams, Group};
use super::solver::Trajectory;
use super::transport::TransportParams;
use super::SimError;
use crate::container::Container;
use crate::tensor::Tensor;

pub const SNAPSHOT_KIND: &str = "epi-snapshots";

/// Everything needed to reproduce a stored run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub nx: usize,
    pub ny: usize,
    pub cell_size: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub params: EpiParams,
    pub transport: TransportParams,
    pub transport_digest: String,
    pub seed: Option<u64>,
}

/// A stored trajectory: one row of `8 · n_cells` values per time level.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshots {
    pub header: SnapshotHeader,
    pub region_map: Vec<u8>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Snapshots {
    pub fn from_trajectory(
        grid: &Grid,
        params: &EpiParams,
        transport: &TransportParams,
        traj: &Trajectory,
        seed: Option<u64>,
    ) -> Self {
        Self {
            header: SnapshotHeader {
                nx: grid.nx,
                ny: grid.ny,
                cell_size: grid.cell_size,
                dt: traj.dt,
                n_steps: traj.n_steps(),
                params: *params,
                transport: transport.clone(),
                transport_digest: transport.digest(),
                seed,
            },
            region_map: grid.region_map.clone(),
            times: traj.fields.iter().map(|f| f.time).collect(),
            states: traj.fields.iter().map(|f| f.values().to_vec()).collect(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.header.nx * self.header.ny
    }

    pub fn grid(&self) -> Result<Grid, SimError> {
        Grid::new(
            self.header.nx,
            self.header.ny,
            self.header.cell_size,
            self.region_map.clone(),
        )
    }

    pub fn field(&self, level: usize) -> Result<StateField, SimError> {
        StateField::from_values(self.n_cells(), self.states[level].clone(), self.times[level])
    }

    pub fn to_container(&self) -> Container {
        let width = N_FIELDS * self.n_cells();
        let flat: Vec<f64> = self.states.iter().flatten().copied().collect();
        let mut c = Container::new()
            .with_meta("kind", SNAPSHOT_KIND)
            .with_meta(
                "header",
                serde_json::to_string(&self.header).expect("header serializes"),
            );
        c.tensors.insert(
            "states",
            Tensor::new(vec![self.states.len(), width], flat).expect("rows have equal width"),
        );
        c.tensors.insert("times", Tensor::vector(self.times.clone()));
        c.tensors.insert(
            "region_map",
            Tensor::vector(self.region_map.iter().map(|&r| r as f64).collect()),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, SimError> {
        if c.meta("kind")? != SNAPSHOT_KIND {
            return Err(SimError::Format(format!(
                "expected a {SNAPSHOT_KIND} container, found {}",
                c.meta("kind")?
            )));
        }
        let header: SnapshotHeader = serde_json::from_str(c.meta("header")?)
            .map_err(|e| SimError::Format(format!("snapshot header: {e}")))?;
        let states = c.tensor("states")?;
        let width = N_FIELDS * header.nx * header.ny;
        if states.ndim() != 2 || states.shape()[1] != width || states.shape()[0] != header.n_steps + 1 {
            return Err(SimError::Format(format!(
                "states tensor has shape {:?}, expected [{}, {width}]",
                states.shape(),
                header.n_steps + 1
            )));
        }
        let times = c.tensor("times")?.data().to_vec();
        let region_map = c.tensor("region_map")?.data().iter().map(|&r| r as u8).collect();
        Ok(Self {
            states: states.data().chunks(width).map(<[f64]>::to_vec).collect(),
            header,
            region_map,
            times,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_container(&Container::load(path)?)
    }

    /// Long-format CSV: one row per level, cell, group and compartment.
    pub fn write_csv(&self, path: &Path) -> Result<(), SimError> {
        let file = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(["level", "time", "cell_x", "cell_y", "group", "compartment", "value"])?;
        let n = self.n_cells();
        for (level, (state, t)) in self.states.iter().zip(&self.times).enumerate() {
            for g in Group::ALL {
                for comp in Compartment::ALL {
                    for cell in 0..n {
                        let (x, y) = (cell % self.header.nx, cell / self.header.nx);
                        w.write_record([
                            level.to_string(),
                            t.to_string(),
                            x.to_string(),
                            y.to_string(),
                            g.name().to_string(),
                            comp.name().to_string(),
                            state[slot_index(n, g, comp, cell)].to_string(),
                        ])?;
                    }
                }
            }
        }
        w.into_inner()
            .map_err(|e| SimError::io(path, e.into_error()))?
            .flush()
            .map_err(|e| SimError::io(path, e))
    }
}
