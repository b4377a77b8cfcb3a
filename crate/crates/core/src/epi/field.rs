use serde::{Deserialize, Serialize};

use super::grid::{Grid, HOME_REGION};
use super::params::{Compartment, Group};
use super::SimError;

/// Number of state variables per cell: 4 compartments × 2 groups.
pub const N_FIELDS: usize = 8;

/// Position of `(group, compartment, cell)` in the flattened state vector.
///
/// The order is group-major (home S,E,I,R then mobile S,E,I,R) and cell-major
/// within each variable. Snapshot files and the POD basis share this order.
pub fn slot_index(n_cells: usize, group: Group, comp: Compartment, cell: usize) -> usize {
    field_index(group, comp) * n_cells + cell
}

/// Index of the variable `(group, compartment)` among the eight fields.
pub fn field_index(group: Group, comp: Compartment) -> usize {
    group.index() * 4 + comp.index()
}

/// People per compartment, group and cell at one instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateField {
    n_cells: usize,
    values: Vec<f64>,
    /// Seconds since the start of the simulation.
    pub time: f64,
}

impl StateField {
    pub fn zeros(n_cells: usize) -> Self {
        Self {
            n_cells,
            values: vec![0.0; N_FIELDS * n_cells],
            time: 0.0,
        }
    }

    pub fn from_values(n_cells: usize, values: Vec<f64>, time: f64) -> Result<Self, SimError> {
        if values.len() != N_FIELDS * n_cells {
            return Err(SimError::Shape(format!(
                "{} values for {n_cells} cells",
                values.len()
            )));
        }
        Ok(Self {
            n_cells,
            values,
            time,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn get(&self, group: Group, comp: Compartment, cell: usize) -> f64 {
        self.values[slot_index(self.n_cells, group, comp, cell)]
    }

    pub fn set(&mut self, group: Group, comp: Compartment, cell: usize, v: f64) {
        let i = slot_index(self.n_cells, group, comp, cell);
        self.values[i] = v;
    }

    /// One variable over all cells.
    pub fn variable(&self, group: Group, comp: Compartment) -> &[f64] {
        let f = field_index(group, comp);
        &self.values[f * self.n_cells..(f + 1) * self.n_cells]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Total people over all cells, groups and compartments.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn group_total(&self, group: Group) -> f64 {
        Compartment::ALL
            .iter()
            .map(|&c| self.variable(group, c).iter().sum::<f64>())
            .sum()
    }
}

/// Initial state: `population_per_home_cell` people in the home group of each
/// home-region cell, a fraction `exposed_fraction` of them exposed; everything
/// else empty.
pub fn make_initial_field(
    grid: &Grid,
    population_per_home_cell: f64,
    exposed_fraction: f64,
) -> Result<StateField, SimError> {
    if !(0.0..=1.0).contains(&exposed_fraction) || population_per_home_cell < 0.0 {
        return Err(SimError::InvalidParam(format!(
            "population {population_per_home_cell}, exposed fraction {exposed_fraction}"
        )));
    }
    let mut f = StateField::zeros(grid.n_cells());
    for cell in grid.cells_in_region(HOME_REGION) {
        f.set(
            Group::Home,
            Compartment::S,
            cell,
            (1.0 - exposed_fraction) * population_per_home_cell,
        );
        f.set(
            Group::Home,
            Compartment::E,
            cell,
            exposed_fraction * population_per_home_cell,
        );
    }
    Ok(f)
}
