use serde::{Deserialize, Serialize};

use super::SimError;

/// Region ids of the idealised town on its 5×5 block layout, listed from the
/// top block row to the bottom one. Region 1 is unreachable, region 2 holds
/// the homes and regions 2–10 form the cross people can travel along.
const TOWN_BLOCKS: [[u8; 5]; 5] = [
    [1, 1, 6, 1, 1],
    [1, 1, 10, 1, 1],
    [3, 8, 4, 9, 5],
    [1, 1, 7, 1, 1],
    [1, 1, 2, 1, 1],
];

pub const HOME_REGION: u8 = 2;

/// Structured 2-D grid of square control volumes.
///
/// Cells are indexed row-major from the bottom-left corner:
/// `cell = row * nx + col`, with `row` increasing upwards (y) and `col`
/// increasing to the right (x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    /// Side length of one cell in metres.
    pub cell_size: f64,
    pub region_map: Vec<u8>,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, cell_size: f64, region_map: Vec<u8>) -> Result<Self, SimError> {
        if nx == 0 || ny == 0 || region_map.len() != nx * ny || !(cell_size > 0.0) {
            return Err(SimError::InvalidParam(format!(
                "grid {nx}x{ny} with {} region entries and cell size {cell_size}",
                region_map.len()
            )));
        }
        Ok(Self {
            nx,
            ny,
            cell_size,
            region_map,
        })
    }

    /// The 100 km × 100 km town on a 10×10 grid: every region block is 2×2 cells.
    pub fn idealised_town() -> Self {
        Self::town_with_resolution(2, 10_000.0)
    }

    /// The town layout with `cells_per_block`² cells in each region block.
    pub fn town_with_resolution(cells_per_block: usize, cell_size: f64) -> Self {
        let n = 5 * cells_per_block;
        let mut region_map = vec![0; n * n];
        for row in 0..n {
            for col in 0..n {
                let block_row_from_top = 4 - row / cells_per_block;
                region_map[row * n + col] = TOWN_BLOCKS[block_row_from_top][col / cells_per_block];
            }
        }
        Self {
            nx: n,
            ny: n,
            cell_size,
            region_map,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell(&self, col: usize, row: usize) -> usize {
        row * self.nx + col
    }

    /// `(col, row)` of a cell index.
    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    pub fn region(&self, cell: usize) -> u8 {
        self.region_map[cell]
    }

    pub fn cells_in_region(&self, region: u8) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_cells()).filter(move |&c| self.region_map[c] == region)
    }

    /// Cells where mobile people may be: every region except 1.
    pub fn is_travel_cell(&self, cell: usize) -> bool {
        self.region_map[cell] >= HOME_REGION
    }

    /// The cell with minimal (x, y) among the region's cells.
    pub fn bottom_left_of(&self, region: u8) -> Option<usize> {
        // Row-major from the bottom, so the first match minimises row, then
        // column within that row.
        self.cells_in_region(region).min_by_key(|&c| {
            let (col, row) = self.coords(c);
            (row, col)
        })
    }

    /// Face-neighbours of `cell` (no wrap-around).
    pub fn neighbours(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        let (col, row) = self.coords(cell);
        let cands = [
            (col > 0).then(|| cell - 1),
            (col + 1 < self.nx).then(|| cell + 1),
            (row > 0).then(|| cell - self.nx),
            (row + 1 < self.ny).then(|| cell + self.nx),
        ];
        cands.into_iter().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn town_layout() {
        let g = Grid::idealised_town();
        assert_eq!(g.n_cells(), 100);
        // Homes: bottom-centre block.
        let homes: Vec<usize> = g.cells_in_region(2).collect();
        assert_eq!(homes, vec![g.cell(4, 0), g.cell(5, 0), g.cell(4, 1), g.cell(5, 1)]);
        // Cross centre.
        assert_eq!(g.region(g.cell(4, 4)), 4);
        assert_eq!(g.region(g.cell(0, 5)), 3);
        assert_eq!(g.region(g.cell(9, 4)), 5);
        assert_eq!(g.region(g.cell(5, 9)), 6);
        assert_eq!(g.region(g.cell(0, 0)), 1);
        // 9 travel regions of 4 cells each.
        assert_eq!((0..100).filter(|&c| g.is_travel_cell(c)).count(), 36);
        for r in 2..=10 {
            assert_eq!(g.cells_in_region(r).count(), 4);
        }
    }

    #[test]
    fn bottom_left_cells() {
        let g = Grid::idealised_town();
        assert_eq!(g.bottom_left_of(2), Some(g.cell(4, 0)));
        assert_eq!(g.bottom_left_of(3), Some(g.cell(0, 4)));
        assert_eq!(g.bottom_left_of(6), Some(g.cell(4, 8)));
        assert_eq!(g.bottom_left_of(11), None);
    }

    #[test]
    fn neighbours_at_corner() {
        let g = Grid::idealised_town();
        let n: Vec<usize> = g.neighbours(0).collect();
        assert_eq!(n, vec![1, 10]);
        assert_eq!(g.neighbours(g.cell(5, 5)).count(), 4);
    }
}
