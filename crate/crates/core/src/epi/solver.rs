//! Implicit finite-volume solver for the two-group spatial SEIRS system.
//!
//! Each step is backward Euler. The infection term `β S I / N` is linearised
//! with the force of infection `β I / N` lagged at the previous Picard
//! iterate, which leaves a linear system coupling the 8 variables through
//! reactions, group exchange and diffusion. That system is solved by block
//! forward-backward Gauss-Seidel over the variables, with a forward-backward
//! Gauss-Seidel sweep over the cells inside each block.

use serde::{Deserialize, Serialize};

use super::field::{StateField, N_FIELDS};
use super::grid::Grid;
use super::params::EpiParams;
use super::transport::TransportParams;
use super::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Picard stops once `‖x_k − x_{k−1}‖ / ‖x_k‖` falls below this.
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Relative residual target of the linear solve.
    pub gs_tol: f64,
    pub gs_max_sweeps: usize,
    /// Values in `[−negative_tol, 0)` are clamped to zero; lower is an error.
    pub negative_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            picard_tol: 1e-8,
            picard_max_iter: 50,
            gs_tol: 1e-10,
            gs_max_sweeps: 200,
            negative_tol: 1e-9,
        }
    }
}

/// Convergence record of one time step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Relative update norm after each Picard iteration.
    pub picard_updates: Vec<f64>,
    /// Block sweeps summed over all Picard iterations.
    pub block_sweeps: usize,
}

/// Solution of [`run_simulation`]: `n_steps + 1` fields, initial one first.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    pub fields: Vec<StateField>,
    pub reports: Vec<StepReport>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.fields.len().saturating_sub(1)
    }

    pub fn totals(&self) -> Vec<f64> {
        self.fields.iter().map(StateField::total).collect()
    }
}

/// A configured solver. Face coefficients and transmission rates are
/// computed once here and reused by every step.
#[derive(Clone, Debug)]
pub struct Simulator {
    grid: Grid,
    params: EpiParams,
    transport: TransportParams,
    config: SolverConfig,
    betas: [f64; 2],
    travel: Vec<bool>,
    // faces[f][c]: (neighbour, k_face / dx²) for variable f at cell c.
    faces: Vec<Vec<Vec<(usize, f64)>>>,
}

impl Simulator {
    pub fn new(
        grid: &Grid,
        params: &EpiParams,
        transport: &TransportParams,
        config: SolverConfig,
    ) -> Result<Self, SimError> {
        params.validate()?;
        for k in transport.diffusion.iter().flatten() {
            if !(*k >= 0.0 && k.is_finite()) {
                return Err(SimError::InvalidParam(format!("diffusivity {k}")));
            }
        }
        let betas = params.betas()?;
        let n = grid.n_cells();
        let travel: Vec<bool> = (0..n).map(|c| grid.is_travel_cell(c)).collect();
        let dx2 = grid.cell_size * grid.cell_size;
        let mut faces = Vec::with_capacity(N_FIELDS);
        for f in 0..N_FIELDS {
            let k = transport.diffusion[f / 4][f % 4];
            let kc = |c: usize| if travel[c] { k } else { 0.0 };
            let per_cell = (0..n)
                .map(|c| {
                    grid.neighbours(c)
                        .filter_map(|nb| {
                            let (a, b) = (kc(c), kc(nb));
                            // Harmonic mean: zero flux into cells nobody travels to.
                            let kf = if a > 0.0 && b > 0.0 { 2.0 * a * b / (a + b) } else { 0.0 };
                            (kf > 0.0).then_some((nb, kf / dx2))
                        })
                        .collect()
                })
                .collect();
            faces.push(per_cell);
        }
        Ok(Self {
            grid: grid.clone(),
            params: *params,
            transport: transport.clone(),
            config,
            betas,
            travel,
            faces,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn params(&self) -> &EpiParams {
        &self.params
    }

    pub fn transport(&self) -> &TransportParams {
        &self.transport
    }

    /// Advance `field` by one backward-Euler step of length `dt`.
    pub fn step(&self, field: &StateField, dt: f64) -> Result<(StateField, StepReport), SimError> {
        let n = self.grid.n_cells();
        if field.n_cells() != n {
            return Err(SimError::Shape(format!(
                "field has {} cells, grid has {n}",
                field.n_cells()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::InvalidParam(format!("dt = {dt}")));
        }
        let t1 = field.time + dt;
        let x0 = field.values();
        let mut report = StepReport::default();
        let b_norm = norm(x0) / dt;
        if b_norm == 0.0 {
            return Ok((StateField::from_values(n, vec![0.0; x0.len()], t1)?, report));
        }

        let sys = System {
            sim: self,
            x0,
            dt,
            rates: self.transport.exchange_rates(t1),
            force: vec![0.0; 2 * n],
        };
        let mut sys = sys;
        let mut x = x0.to_vec();
        let mut prev = vec![0.0; x.len()];
        let mut converged = false;
        for _ in 0..self.config.picard_max_iter {
            sys.update_force(&x);
            prev.copy_from_slice(&x);
            report.block_sweeps += sys.solve(&mut x, b_norm, t1)?;
            let diff: f64 = x.iter().zip(&prev).map(|(a, b)| (a - b) * (a - b)).sum();
            let upd = diff.sqrt() / norm(&x).max(f64::MIN_POSITIVE);
            report.picard_updates.push(upd);
            if upd < self.config.picard_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(SimError::PicardDiverged {
                time: t1,
                iterations: report.picard_updates.len(),
                residual: *report.picard_updates.last().unwrap_or(&f64::NAN),
            });
        }

        for (slot, v) in x.iter_mut().enumerate() {
            if *v < 0.0 {
                if *v < -self.config.negative_tol {
                    return Err(SimError::Negative {
                        slot,
                        value: *v,
                        time: t1,
                    });
                }
                *v = 0.0;
            }
        }
        Ok((StateField::from_values(n, x, t1)?, report))
    }

    pub fn run(&self, initial: &StateField, dt: f64, n_steps: usize) -> Result<Trajectory, SimError> {
        let mut fields = Vec::with_capacity(n_steps + 1);
        let mut reports = Vec::with_capacity(n_steps);
        fields.push(initial.clone());
        for _ in 0..n_steps {
            let (next, rep) = self.step(fields.last().expect("non-empty"), dt)?;
            fields.push(next);
            reports.push(rep);
        }
        Ok(Trajectory {
            dt,
            fields,
            reports,
        })
    }
}

/// The linear system of one Picard iteration.
struct System<'a> {
    sim: &'a Simulator,
    x0: &'a [f64],
    dt: f64,
    rates: ([f64; 4], [f64; 4]),
    // β_g I_g / N_g per group and cell, from the last iterate.
    force: Vec<f64>,
}

impl System<'_> {
    fn update_force(&mut self, x: &[f64]) {
        let n = self.sim.grid.n_cells();
        for g in 0..2 {
            for c in 0..n {
                let base = g * 4 * n + c;
                let (s, e, i, r) = (x[base], x[base + n], x[base + 2 * n], x[base + 3 * n]);
                let total = s + e + i + r;
                self.force[g * n + c] = if total > 0.0 {
                    self.sim.betas[g] * i / total
                } else {
                    0.0
                };
            }
        }
    }

    /// Diagonal and off-diagonal-plus-source part of row `(f, c)`:
    /// the row reads `diag · x[f, c] = rhs`.
    #[inline]
    fn row(&self, x: &[f64], f: usize, c: usize) -> (f64, f64) {
        let sim = self.sim;
        let p = &sim.params;
        let n = sim.grid.n_cells();
        let (g, k) = (f / 4, f % 4);
        let at = |ff: usize| x[ff * n + c];
        let s = g * 4;
        let mut diag = 1.0 / self.dt;
        let mut rhs = self.x0[f * n + c] / self.dt;
        match k {
            0 => {
                // Births (η N) balance deaths; ηS sits on the diagonal.
                diag += self.force[g * n + c] + p.nu - p.eta;
                rhs += p.eta * (at(s + 1) + at(s + 2) + at(s + 3)) + p.xi * at(s + 3);
            }
            1 => {
                diag += p.sigma + p.nu;
                rhs += self.force[g * n + c] * at(s);
            }
            2 => {
                diag += p.gamma + p.nu;
                rhs += p.sigma * at(s + 1);
            }
            _ => {
                diag += p.xi + p.nu;
                rhs += p.gamma * at(s + 2);
            }
        }
        if sim.travel[c] {
            let (out, back) = self.rates;
            let (leave, arrive) = if g == 0 { (out[k], back[k]) } else { (back[k], out[k]) };
            diag += leave;
            rhs += arrive * at((1 - g) * 4 + k);
        }
        for &(nb, coef) in &sim.faces[f][c] {
            diag += coef;
            rhs += coef * x[f * n + nb];
        }
        (diag, rhs)
    }

    fn relax(&self, x: &mut [f64], f: usize, c: usize) {
        let (d, r) = self.row(x, f, c);
        x[f * self.sim.grid.n_cells() + c] = r / d;
    }

    /// Forward-backward Gauss-Seidel over the cells of variable `f`.
    fn sweep_variable(&self, x: &mut [f64], f: usize) {
        let n = self.sim.grid.n_cells();
        for c in 0..n {
            self.relax(x, f, c);
        }
        // A variable with no diffusion is diagonal in space: one pass is exact.
        if self.sim.faces[f].iter().any(|v| !v.is_empty()) {
            for c in (0..n).rev() {
                self.relax(x, f, c);
            }
        }
    }

    fn residual(&self, x: &[f64]) -> f64 {
        let n = self.sim.grid.n_cells();
        let mut sum = 0.0;
        for f in 0..N_FIELDS {
            for c in 0..n {
                let (d, r) = self.row(x, f, c);
                let res = d * x[f * n + c] - r;
                sum += res * res;
            }
        }
        sum.sqrt()
    }

    /// Block FBGS until the relative residual meets the tolerance.
    /// Returns the number of block sweeps.
    fn solve(&self, x: &mut [f64], b_norm: f64, time: f64) -> Result<usize, SimError> {
        let cfg = &self.sim.config;
        let mut res = f64::NAN;
        for sweep in 1..=cfg.gs_max_sweeps {
            if sweep % 2 == 1 {
                for f in 0..N_FIELDS {
                    self.sweep_variable(x, f);
                }
            } else {
                for f in (0..N_FIELDS).rev() {
                    self.sweep_variable(x, f);
                }
            }
            res = self.residual(x) / b_norm;
            if res < cfg.gs_tol {
                return Ok(sweep);
            }
        }
        Err(SimError::LinearSolve {
            time,
            sweeps: cfg.gs_max_sweeps,
            residual: res,
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// One implicit step with the default solver settings.
pub fn ext_seirs_step(
    grid: &Grid,
    field: &StateField,
    params: &EpiParams,
    transport: &TransportParams,
    dt: f64,
) -> Result<StateField, SimError> {
    Simulator::new(grid, params, transport, SolverConfig::default())?
        .step(field, dt)
        .map(|(f, _)| f)
}

pub fn run_simulation(
    grid: &Grid,
    params: &EpiParams,
    transport: &TransportParams,
    initial: &StateField,
    dt: f64,
    n_steps: usize,
) -> Result<Trajectory, SimError> {
    Simulator::new(grid, params, transport, SolverConfig::default())?.run(initial, dt, n_steps)
}
