//! Parameter estimation by alternating forward and backward latent marches
//! whose functionals also penalise the mismatch with observations.

use std::collections::HashSet;
use std::path::Path;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epi::{slot_index, Compartment, Group, Snapshots};
use crate::gan::WindowGenerator;
use crate::pod::{NormalizationSpec, PodBasis};
use crate::predgan::{
    initial_latent, optimize_latent, Direction, LevelReport, LossGraph, LossInputs, PredError,
    PredLossConfig, WindowObservations, WindowScaling,
};

#[derive(Debug, Error)]
pub enum DaError {
    #[error("invalid observations: {0}")]
    Observation(String),
    #[error("cannot form weights: {0}")]
    Weights(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Pred(#[from] PredError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// People group an observation refers to; `Total` sums home and mobile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsGroup {
    Home,
    Mobile,
    Total,
}

impl ObsGroup {
    pub fn groups(self) -> &'static [Group] {
        match self {
            ObsGroup::Home => &[Group::Home],
            ObsGroup::Mobile => &[Group::Mobile],
            ObsGroup::Total => &Group::ALL,
        }
    }
}

/// One observed value. `time_level` indexes stored simulation levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time_level: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub group: ObsGroup,
    pub compartment: Compartment,
    pub value: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub entries: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(entries: Vec<Observation>) -> Result<Self, DaError> {
        if entries.is_empty() {
            return Err(DaError::Observation("no entries".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !(e.weight >= 0.0 && e.weight.is_finite()) || !e.value.is_finite() {
                return Err(DaError::Observation(format!(
                    "entry at level {} cell ({}, {}) has value {} weight {}",
                    e.time_level, e.cell_x, e.cell_y, e.value, e.weight
                )));
            }
            if !seen.insert((e.time_level, e.cell_x, e.cell_y, e.group, e.compartment)) {
                return Err(DaError::Observation(format!(
                    "duplicate entry at level {} cell ({}, {}) {:?} {:?}",
                    e.time_level, e.cell_x, e.cell_y, e.group, e.compartment
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn read_csv(path: &Path) -> Result<Self, DaError> {
        let mut r = csv::Reader::from_path(path)?;
        let entries = r.deserialize().collect::<Result<Vec<Observation>, _>>()?;
        Self::new(entries)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DaError> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|source| DaError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// What to observe when synthesising observations from a stored run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSpec {
    /// Cells as `(x, y)`.
    pub cells: Vec<(usize, usize)>,
    pub fields: Vec<(ObsGroup, Compartment)>,
    /// Stored levels at which every cell and field is observed.
    pub levels: Vec<usize>,
    /// Relative standard deviation of multiplicative Gaussian noise.
    pub noise: f64,
    pub weight: f64,
}

/// `u_obs = u (1 + noise · N(0, 1))`, clamped at zero.
pub fn synthesize_observations(
    truth: &Snapshots,
    spec: &ObservationSpec,
    seed: u64,
) -> Result<ObservationSet, DaError> {
    let (nx, ny) = (truth.header.nx, truth.header.ny);
    let n_cells = nx * ny;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for &level in &spec.levels {
        let state = truth.states.get(level).ok_or_else(|| {
            DaError::Observation(format!("level {level} beyond the {} stored", truth.states.len()))
        })?;
        for &(x, y) in &spec.cells {
            if x >= nx || y >= ny {
                return Err(DaError::Observation(format!("cell ({x}, {y}) outside the grid")));
            }
            for &(group, compartment) in &spec.fields {
                let cell = y * nx + x;
                let u: f64 = group
                    .groups()
                    .iter()
                    .map(|&g| state[slot_index(n_cells, g, compartment, cell)])
                    .sum();
                let eps: f64 = StandardNormal.sample(&mut rng);
                entries.push(Observation {
                    time_level: level,
                    cell_x: x,
                    cell_y: y,
                    group,
                    compartment,
                    value: (u * (1.0 + spec.noise * eps)).max(0.0),
                    weight: spec.weight,
                });
            }
        }
    }
    ObservationSet::new(entries)
}

/// Marching levels as a lattice over stored levels: level `ℓ` is stored
/// level `start + ℓ · stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelMap {
    pub start: usize,
    pub stride: usize,
    pub n_levels: usize,
}

impl LevelMap {
    pub fn stored(&self, level: usize) -> usize {
        self.start + level * self.stride
    }

    /// Marching level of a stored level, if it lies on the lattice.
    pub fn level_of(&self, stored: usize) -> Option<usize> {
        if stored < self.start || (stored - self.start) % self.stride != 0 {
            return None;
        }
        let l = (stored - self.start) / self.stride;
        (l < self.n_levels).then_some(l)
    }

    /// Stored levels closest to each of `times` (seconds), on the lattice.
    pub fn nearest_levels(&self, dt: f64, times: &[f64]) -> Vec<usize> {
        let mut out: Vec<usize> = times
            .iter()
            .map(|&t| {
                let l = ((t / dt - self.start as f64) / self.stride as f64).round();
                l.clamp(0.0, (self.n_levels - 1) as f64) as usize
            })
            .map(|l| self.stored(l))
            .collect();
        out.dedup();
        out
    }
}

/// An observation mapped into coefficient space: its residual is
/// `hb · α + hu − value` at marching level `level`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedEntry {
    pub level: usize,
    pub slots: Vec<usize>,
    pub hb: Vec<f64>,
    pub hu: f64,
    pub value: f64,
    pub weight: f64,
}

impl ObservedEntry {
    pub fn residual(&self, alpha: &[f64]) -> f64 {
        self.hb.iter().zip(alpha).map(|(h, a)| h * a).sum::<f64>() + self.hu - self.value
    }
}

/// Observations with positive weight, projected through the basis.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationOperator {
    pub entries: Vec<ObservedEntry>,
    pub n_levels: usize,
}

impl ObservationOperator {
    pub fn new(
        obs: &ObservationSet,
        basis: &PodBasis,
        nx: usize,
        ny: usize,
        levels: &LevelMap,
    ) -> Result<Self, DaError> {
        let n_cells = nx * ny;
        if basis.n_state != 8 * n_cells {
            return Err(DaError::Shape(format!(
                "basis has {} state values, grid needs {}",
                basis.n_state,
                8 * n_cells
            )));
        }
        let mut entries = Vec::new();
        for e in obs.entries.iter().filter(|e| e.weight > 0.0) {
            let level = levels.level_of(e.time_level).ok_or_else(|| {
                DaError::Observation(format!(
                    "stored level {} is not a marching level (start {}, stride {}, {} levels)",
                    e.time_level, levels.start, levels.stride, levels.n_levels
                ))
            })?;
            if e.cell_x >= nx || e.cell_y >= ny {
                return Err(DaError::Observation(format!(
                    "cell ({}, {}) outside the grid",
                    e.cell_x, e.cell_y
                )));
            }
            let cell = e.cell_y * nx + e.cell_x;
            let slots: Vec<usize> = e
                .group
                .groups()
                .iter()
                .map(|&g| slot_index(n_cells, g, e.compartment, cell))
                .collect();
            let mut hb = vec![0.0; basis.n_pod];
            let mut hu = 0.0;
            for &s in &slots {
                for (j, h) in hb.iter_mut().enumerate() {
                    *h += basis.basis[s * basis.n_pod + j];
                }
                hu += basis.mean[s];
            }
            entries.push(ObservedEntry {
                level,
                slots,
                hb,
                hu,
                value: e.value,
                weight: e.weight,
            });
        }
        Ok(Self {
            entries,
            n_levels: levels.n_levels,
        })
    }

    fn in_range(&self, first: usize, len: usize) -> impl Iterator<Item = &ObservedEntry> {
        self.entries
            .iter()
            .filter(move |e| e.level >= first && e.level < first + len)
    }

    /// Sum of observation weights over levels `first..first + len`.
    pub fn weight_sum(&self, first: usize, len: usize) -> f64 {
        self.in_range(first, len).map(|e| e.weight).sum()
    }

    /// Entries of levels `first..first + len`, rows relative to `first`,
    /// weights multiplied by `zeta_obs`.
    pub fn window(&self, first: usize, len: usize, zeta_obs: f64) -> WindowObservations {
        let mut w = WindowObservations::default();
        for e in self.in_range(first, len) {
            w.row.push(e.level - first);
            w.hb.push(e.hb.clone());
            w.offset.push(e.hu - e.value);
            w.weight.push(zeta_obs * e.weight);
        }
        w
    }

    /// Unweighted `(Σ residual², count)` over every entry of a trajectory.
    pub fn mismatch(&self, alpha: &[Vec<f64>]) -> (f64, usize) {
        let mut sum = 0.0;
        let mut n = 0;
        for e in &self.entries {
            if let Some(a) = alpha.get(e.level) {
                let r = e.residual(a);
                sum += r * r;
                n += 1;
            }
        }
        (sum, n)
    }

    pub fn average_mismatch(&self, alpha: &[Vec<f64>]) -> f64 {
        let (s, n) = self.mismatch(alpha);
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

/// `Σ_k ζ_obs w (Hα + Hū − u_obs)²` over the levels `first..first + alpha.len()`.
pub fn observation_loss(
    alpha: &[Vec<f64>],
    first: usize,
    op: &ObservationOperator,
    zeta_obs: f64,
) -> f64 {
    op.in_range(first, alpha.len())
        .map(|e| {
            let r = e.residual(&alpha[e.level - first]);
            zeta_obs * e.weight * r * r
        })
        .sum()
}

/// Assimilation functional of one window: the prediction terms over the
/// known rows plus the observation term over their levels. `first_level` is
/// the level of the first known row.
#[allow(clippy::too_many_arguments)]
fn da_loss(
    direction: Direction,
    generator: &dyn WindowGenerator,
    scaling: &WindowScaling,
    z: &[f64],
    known_alpha: &[Vec<f64>],
    known_mu: &[Vec<f64>],
    first_level: usize,
    op: &ObservationOperator,
    weights: &DaWeights,
    zeta_mu: f64,
) -> Result<f64, DaError> {
    let m = generator.rows();
    if known_alpha.len() != m - 1 {
        return Err(DaError::Shape(format!("{} known levels, need {}", known_alpha.len(), m - 1)));
    }
    let zeta_obs = weights.zeta_obs(m, op.weight_sum(first_level, m - 1));
    let inputs = LossInputs::new(
        known_alpha,
        known_mu,
        &weights.w_alpha,
        &weights.w_mu,
        zeta_mu,
        &op.window(first_level, m - 1, zeta_obs),
    )?;
    let mut lg = LossGraph::new(generator, scaling, weights.w_alpha.len(), direction);
    Ok(lg.loss(z, &inputs)?)
}

/// Forward window predicting level `first_level + m − 1`.
#[allow(clippy::too_many_arguments)]
pub fn da_forward_loss(
    generator: &dyn WindowGenerator,
    scaling: &WindowScaling,
    z: &[f64],
    known_alpha: &[Vec<f64>],
    known_mu: &[Vec<f64>],
    first_level: usize,
    op: &ObservationOperator,
    weights: &DaWeights,
    zeta_mu: f64,
) -> Result<f64, DaError> {
    da_loss(Direction::Forward, generator, scaling, z, known_alpha, known_mu, first_level, op, weights, zeta_mu)
}

/// Backward window predicting level `first_level − 1`.
#[allow(clippy::too_many_arguments)]
pub fn da_backward_loss(
    generator: &dyn WindowGenerator,
    scaling: &WindowScaling,
    z: &[f64],
    known_alpha: &[Vec<f64>],
    known_mu: &[Vec<f64>],
    first_level: usize,
    op: &ObservationOperator,
    weights: &DaWeights,
    zeta_mu: f64,
) -> Result<f64, DaError> {
    da_loss(Direction::Backward, generator, scaling, z, known_alpha, known_mu, first_level, op, weights, zeta_mu)
}

/// Global value ranges of the training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranges {
    pub alpha: f64,
    pub mu: f64,
    pub u: f64,
}

impl Ranges {
    /// `Δα` and `Δμ` from the window normalisation (first `n_pod` channels
    /// are coefficients), `Δu` from the snapshot range of the basis.
    pub fn from_training(norm: &NormalizationSpec, n_pod: usize, basis: &PodBasis) -> Self {
        let span = |lo: &[f64], hi: &[f64]| {
            hi.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - lo.iter().copied().fold(f64::INFINITY, f64::min)
        };
        Self {
            alpha: span(&norm.min[..n_pod], &norm.max[..n_pod]),
            mu: span(&norm.min[n_pod..], &norm.max[n_pod..]),
            u: basis.state_range.1 - basis.state_range.0,
        }
    }
}

/// Weighting of the three terms of the assimilation functional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaWeights {
    pub zeta_hat_obs: f64,
    pub ranges: Ranges,
    pub w_alpha: Vec<f64>,
    pub w_mu: Vec<f64>,
}

impl DaWeights {
    /// `ζ̂_obs (Δα/Δu)² (m − 1) ΣW_α / Σ_k ΣW_u`, zero for a window without
    /// observations.
    pub fn zeta_obs(&self, m: usize, window_weight_sum: f64) -> f64 {
        if window_weight_sum == 0.0 {
            return 0.0;
        }
        let ratio = self.ranges.alpha / self.ranges.u;
        self.zeta_hat_obs * ratio * ratio * (m - 1) as f64 * self.w_alpha.iter().sum::<f64>()
            / window_weight_sum
    }

    /// `ζ̂_μ (Δα/Δμ)² ΣW_α / ΣW_μ`.
    pub fn zeta_mu(&self, zeta_hat_mu: f64) -> f64 {
        let ratio = self.ranges.alpha / self.ranges.mu;
        zeta_hat_mu * ratio * ratio * self.w_alpha.iter().sum::<f64>() / self.w_mu.iter().sum::<f64>()
    }
}

pub fn compute_weights(
    zeta_hat_obs: f64,
    ranges: Ranges,
    w_alpha: Vec<f64>,
    w_mu: Vec<f64>,
) -> Result<DaWeights, DaError> {
    for (name, v) in [("Δα", ranges.alpha), ("Δμ", ranges.mu), ("Δu", ranges.u)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(DaError::Weights(format!("{name} = {v}")));
        }
    }
    if w_alpha.iter().chain(&w_mu).any(|w| !(*w >= 0.0)) {
        return Err(DaError::Weights("negative weight".into()));
    }
    if w_alpha.iter().sum::<f64>() == 0.0 || w_mu.iter().sum::<f64>() == 0.0 {
        return Err(DaError::Weights("weight diagonal sums to zero".into()));
    }
    Ok(DaWeights {
        zeta_hat_obs,
        ranges,
        w_alpha,
        w_mu,
    })
}

/// `ζ̂_μ` for the `j`-th outer iteration (1-based).
pub fn zeta_hat_mu_schedule(cfg: &DaConfig, j: usize) -> f64 {
    cfg.zeta_hat_mu_start * cfg.zeta_hat_mu_growth.powi(j.saturating_sub(1) as i32)
}

/// The relaxation anchor `zⁿ⁻¹`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Latent of the same level from the previous march in the same direction.
    SameLevel,
    /// Latent of the previous level in the current march.
    PreviousLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaConfig {
    /// Inner optimiser and `W_α`, `W_μ`; its `zeta_mu` is unused here.
    pub pred: PredLossConfig,
    pub zeta_hat_obs: f64,
    pub zeta_hat_mu_prediction: f64,
    pub zeta_hat_mu_start: f64,
    pub zeta_hat_mu_growth: f64,
    pub max_outer: usize,
    pub r_converged: f64,
    pub anchor: AnchorMode,
    /// Scale `W_μ` channels up when their estimates move fast and down when
    /// they stall.
    pub adapt_mu_weights: bool,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            pred: PredLossConfig::default(),
            zeta_hat_obs: 10.0,
            zeta_hat_mu_prediction: 1e-2,
            zeta_hat_mu_start: 1e-4,
            zeta_hat_mu_growth: 1.2,
            max_outer: 50,
            r_converged: 0.01,
            anchor: AnchorMode::SameLevel,
            adapt_mu_weights: false,
        }
    }
}

/// Relaxation factor bookkeeping across outer iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxationState {
    pub r: f64,
    /// Accepted outer iterations so far.
    pub j: usize,
    /// Mismatch of the last accepted forward/backward pair.
    pub reference: f64,
    pub history: Vec<f64>,
}

impl RelaxationState {
    pub fn new(reference: f64) -> Self {
        Self {
            r: 1.0,
            j: 0,
            reference,
            history: Vec::new(),
        }
    }

    /// Record the mismatch of a pair run with the current `r`; returns
    /// whether the pair is accepted. An increase halves `r`, anything else
    /// grows it by 1.5 up to 1.
    pub fn update(&mut self, mismatch: f64) -> bool {
        self.history.push(mismatch);
        if mismatch > self.reference {
            self.r *= 0.5;
            false
        } else {
            self.r = (1.5 * self.r).min(1.0);
            self.reference = mismatch;
            self.j += 1;
            true
        }
    }

    pub fn converged(&self, threshold: f64) -> bool {
        self.r < threshold
    }
}

/// Convex combination `(1 − r) anchor + r ẑ`.
pub fn relax(anchor: &[f64], z_hat: &[f64], r: f64) -> Vec<f64> {
    anchor
        .iter()
        .zip(z_hat)
        .map(|(a, z)| (1.0 - r) * a + r * z)
        .collect()
}

/// `α` and `μ̃` at every marching level.
#[derive(Clone, Debug, PartialEq)]
pub struct DaTrajectory {
    pub alpha: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MarchMode {
    /// Prediction functional only; `μ̃` stays fixed.
    Prediction { zeta_mu: f64 },
    /// Observation term included, predicted `μ` promoted to known, latent
    /// relaxed with factor `r`.
    Assimilation { zeta_mu: f64, r: f64 },
}

/// Outcome of one march.
#[derive(Clone, Debug, PartialEq)]
pub struct MarchResult {
    pub direction: Direction,
    pub trajectory: DaTrajectory,
    /// Accepted latent per level (`None` where the level was known).
    pub z: Vec<Option<Vec<f64>>>,
    /// Levels in the order they were produced.
    pub produced: Vec<usize>,
    pub reports: Vec<LevelReport>,
    /// Sums over levels of the `(α, μ, obs)` terms at the optimised latent.
    pub term_sums: [f64; 3],
    pub mismatch: f64,
}

/// Shared machinery for forward and backward marches.
pub struct Marcher<'a> {
    pub generator: &'a dyn WindowGenerator,
    forward: LossGraph,
    backward: LossGraph,
    pub op: &'a ObservationOperator,
    pub weights: DaWeights,
    pub cfg: &'a DaConfig,
    rows: usize,
    n_pod: usize,
}

impl<'a> Marcher<'a> {
    pub fn new(
        generator: &'a dyn WindowGenerator,
        scaling: &WindowScaling,
        op: &'a ObservationOperator,
        weights: DaWeights,
        cfg: &'a DaConfig,
    ) -> Self {
        let n_pod = weights.w_alpha.len();
        Self {
            generator,
            forward: LossGraph::new(generator, scaling, n_pod, Direction::Forward),
            backward: LossGraph::new(generator, scaling, n_pod, Direction::Backward),
            op,
            weights,
            cfg,
            rows: generator.rows(),
            n_pod,
        }
    }

    fn graph(&mut self, dir: Direction) -> &mut LossGraph {
        match dir {
            Direction::Forward => &mut self.forward,
            Direction::Backward => &mut self.backward,
        }
    }

    /// Functional of the window predicting level `n` in direction `dir`.
    pub fn window_loss(
        &mut self,
        dir: Direction,
        z: &[f64],
        traj: &DaTrajectory,
        n: usize,
        zeta_mu: f64,
        with_obs: bool,
    ) -> Result<f64, DaError> {
        let inputs = self.inputs(dir, traj, n, zeta_mu, with_obs)?;
        Ok(self.graph(dir).loss(z, &inputs)?)
    }

    pub fn window_loss_and_grad(
        &mut self,
        dir: Direction,
        z: &[f64],
        traj: &DaTrajectory,
        n: usize,
        zeta_mu: f64,
        with_obs: bool,
    ) -> Result<(f64, Vec<f64>), DaError> {
        let inputs = self.inputs(dir, traj, n, zeta_mu, with_obs)?;
        Ok(self.graph(dir).loss_and_grad(z, &inputs)?)
    }

    fn inputs(
        &self,
        dir: Direction,
        traj: &DaTrajectory,
        n: usize,
        zeta_mu: f64,
        with_obs: bool,
    ) -> Result<LossInputs, DaError> {
        let k = self.rows - 1;
        let first = match dir {
            Direction::Forward => n.checked_sub(k),
            Direction::Backward => Some(n + 1),
        }
        .filter(|f| f + k <= traj.alpha.len())
        .ok_or_else(|| DaError::Shape(format!("level {n} has no full {dir:?} window")))?;
        let obs = if with_obs {
            let zeta = self.weights.zeta_obs(self.rows, self.op.weight_sum(first, k));
            self.op.window(first, k, zeta)
        } else {
            WindowObservations::default()
        };
        Ok(LossInputs::new(
            &traj.alpha[first..first + k],
            &traj.mu[first..first + k],
            &self.weights.w_alpha,
            &self.weights.w_mu,
            zeta_mu,
            &obs,
        )?)
    }

    /// One march over the whole horizon. `anchors` holds the latent of each
    /// level from the previous march in this direction.
    pub fn march(
        &mut self,
        dir: Direction,
        mode: MarchMode,
        start: &DaTrajectory,
        anchors: Option<&[Option<Vec<f64>>]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<MarchResult, DaError> {
        let n_levels = start.alpha.len();
        let k = self.rows - 1;
        if n_levels < self.rows || start.mu.len() != n_levels {
            return Err(DaError::Shape(format!(
                "{n_levels} levels cannot hold a {}-level window",
                self.rows
            )));
        }
        let order: Vec<usize> = match dir {
            Direction::Forward => (k..n_levels).collect(),
            Direction::Backward => (0..n_levels - k).rev().collect(),
        };
        let (zeta_mu, r, with_obs) = match mode {
            MarchMode::Prediction { zeta_mu } => (zeta_mu, 1.0, false),
            MarchMode::Assimilation { zeta_mu, r } => (zeta_mu, r, true),
        };
        let mut traj = start.clone();
        let mut zs: Vec<Option<Vec<f64>>> = vec![None; n_levels];
        let mut reports = Vec::with_capacity(order.len());
        let mut term_sums = [0.0; 3];
        let mut previous: Option<Vec<f64>> = None;
        let pred_row = dir.predicted_row(self.rows);

        for &n in &order {
            let inputs = self.inputs(dir, &traj, n, zeta_mu, with_obs)?;
            let cfg = &self.cfg.pred;
            let same_level = anchors.and_then(|a| a.get(n).cloned().flatten());
            let lg = match dir {
                Direction::Forward => &mut self.forward,
                Direction::Backward => &mut self.backward,
            };
            let fit = match previous.as_ref().or(same_level.as_ref()) {
                Some(z0) => optimize_latent(lg, &inputs, z0, cfg)?,
                None => initial_latent(lg, &inputs, cfg, rng)?,
            };
            let anchor = match self.cfg.anchor {
                AnchorMode::SameLevel => same_level,
                AnchorMode::PreviousLevel => previous.clone(),
            };
            let z = match (&mode, anchor) {
                (MarchMode::Assimilation { .. }, Some(a)) => relax(&a, &fit.z, r),
                _ => fit.z.clone(),
            };
            lg.loss(&fit.z, &inputs)?;
            let t = lg.terms()?;
            for (s, v) in term_sums.iter_mut().zip(t) {
                *s += v;
            }
            lg.loss(&z, &inputs)?;
            let row = lg.window()?.swap_remove(pred_row);
            traj.alpha[n] = row[..self.n_pod].to_vec();
            if with_obs {
                traj.mu[n] = row[self.n_pod..].to_vec();
            }
            reports.push(LevelReport {
                level: n,
                loss: fit.loss,
                initial_loss: fit.initial_loss,
                iterations: fit.iterations,
                converged: fit.converged,
            });
            zs[n] = Some(z.clone());
            previous = Some(z);
        }
        let (sum, count) = self.op.mismatch(&traj.alpha);
        debug!(
            "{dir:?} march: {} levels, mismatch {:.4e}",
            order.len(),
            if count == 0 { 0.0 } else { sum / count as f64 }
        );
        Ok(MarchResult {
            direction: dir,
            mismatch: self.op.average_mismatch(&traj.alpha),
            trajectory: traj,
            z: zs,
            produced: order,
            reports,
            term_sums,
        })
    }
}

/// One forward/backward pair of the outer loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterIteration {
    pub iteration: usize,
    pub r: f64,
    pub zeta_hat_mu: f64,
    pub mismatch: f64,
    /// Mismatch the pair was compared against.
    pub reference: f64,
    pub accepted: bool,
    pub r_next: f64,
    /// Per-level averages of the `α`, `μ` and observation terms.
    pub loss_alpha: f64,
    pub loss_mu: f64,
    pub loss_obs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assimilation {
    /// Final prediction-mode forward march.
    pub trajectory: DaTrajectory,
    /// Prediction-mode march from the initial guess.
    pub initial: DaTrajectory,
    pub initial_mismatch: f64,
    pub final_mismatch: f64,
    pub iterations: Vec<OuterIteration>,
    /// `μ̃` after every accepted pair.
    pub mu_history: Vec<(usize, Vec<Vec<f64>>)>,
    pub converged: bool,
    pub final_reports: Vec<LevelReport>,
}

impl Assimilation {
    pub fn write_diagnostics(&self, path: &Path) -> Result<(), DaError> {
        let mut w = csv::Writer::from_path(path)?;
        for it in &self.iterations {
            w.serialize(it)?;
        }
        w.flush().map_err(|source| DaError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Final `μ̃` per level: `level, r0_home, r0_mobile` (further channels
    /// as `mu_{i}`).
    pub fn write_mu_history(&self, path: &Path) -> Result<(), DaError> {
        let mut w = csv::Writer::from_path(path)?;
        let n_mu = self.trajectory.mu.first().map_or(0, Vec::len);
        w.write_record(mu_header("level", n_mu))?;
        for (l, mu) in self.trajectory.mu.iter().enumerate() {
            let mut rec = vec![l.to_string()];
            rec.extend(mu.iter().map(f64::to_string));
            w.write_record(rec)?;
        }
        w.flush().map_err(|source| DaError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// `μ̃` of every accepted outer iteration: `iteration, level, …`.
    pub fn write_mu_iterations(&self, path: &Path) -> Result<(), DaError> {
        let mut w = csv::Writer::from_path(path)?;
        let n_mu = self.trajectory.mu.first().map_or(0, Vec::len);
        let mut header = vec!["iteration".to_string()];
        header.extend(mu_header("level", n_mu));
        w.write_record(header)?;
        for (j, mus) in &self.mu_history {
            for (l, mu) in mus.iter().enumerate() {
                let mut rec = vec![j.to_string(), l.to_string()];
                rec.extend(mu.iter().map(f64::to_string));
                w.write_record(rec)?;
            }
        }
        w.flush().map_err(|source| DaError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn mu_header(first: &str, n_mu: usize) -> Vec<String> {
    let mut h = vec![first.to_string()];
    for i in 0..n_mu {
        h.push(match i {
            0 => "r0_home".into(),
            1 => "r0_mobile".into(),
            _ => format!("mu_{i}"),
        });
    }
    h
}

/// Per-channel mean absolute difference over levels.
fn mean_abs_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    let n_mu = a.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n_mu];
    for (x, y) in a.iter().zip(b) {
        for c in 0..n_mu {
            out[c] += (x[c] - y[c]).abs();
        }
    }
    out.iter().map(|s| s / a.len().max(1) as f64).collect()
}

/// Alternate forward and backward assimilation marches from a guess until
/// the relaxation factor drops below `cfg.r_converged`, then finish with a
/// prediction-mode forward march from the assimilated start and `μ̃`.
///
/// `initial` holds the first `m − 1` levels, `mu_guess` the guessed `μ` at
/// every level.
#[allow(clippy::too_many_arguments)]
pub fn assimilate(
    generator: &dyn WindowGenerator,
    scaling: &WindowScaling,
    op: &ObservationOperator,
    weights: &DaWeights,
    initial: &[Vec<f64>],
    mu_guess: &[Vec<f64>],
    cfg: &DaConfig,
    seed: u64,
) -> Result<Assimilation, DaError> {
    let m = generator.rows();
    let n_levels = mu_guess.len();
    if initial.len() != m - 1 {
        return Err(DaError::Shape(format!("{} initial levels, need {}", initial.len(), m - 1)));
    }
    if n_levels < m {
        return Err(DaError::Shape(format!("{n_levels} levels, need at least {m}")));
    }
    let n_pod = weights.w_alpha.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut marcher = Marcher::new(generator, scaling, op, weights.clone(), cfg);
    let base_w_mu = weights.w_mu.clone();
    let mut mu_mult = vec![1.0_f64; base_w_mu.len()];

    let mut guess = DaTrajectory {
        alpha: initial.to_vec(),
        mu: mu_guess.to_vec(),
    };
    guess.alpha.resize(n_levels, vec![0.0; n_pod]);

    // Prediction-mode march from the guess, then a first backward march.
    let zeta_pred = marcher.weights.zeta_mu(cfg.zeta_hat_mu_prediction);
    let first = marcher.march(
        Direction::Forward,
        MarchMode::Prediction { zeta_mu: zeta_pred },
        &guess,
        None,
        &mut rng,
    )?;
    let initial_mismatch = first.mismatch;
    info!("initial forward march mismatch {initial_mismatch:.4e}");
    let zeta0 = marcher.weights.zeta_mu(zeta_hat_mu_schedule(cfg, 1));
    let back = marcher.march(
        Direction::Backward,
        MarchMode::Assimilation { zeta_mu: zeta0, r: 1.0 },
        &first.trajectory,
        None,
        &mut rng,
    )?;
    let mut relax_state = RelaxationState::new(0.5 * (first.mismatch + back.mismatch));
    let mut traj = back.trajectory;
    let mut anchors_f = first.z;
    let mut anchors_b = back.z;
    let mut iterations = Vec::new();
    let mut mu_history = Vec::new();
    let mut converged = false;

    for attempt in 1..=cfg.max_outer {
        let r = relax_state.r;
        let zeta_hat_mu = zeta_hat_mu_schedule(cfg, relax_state.j + 1);
        let zeta_mu = marcher.weights.zeta_mu(zeta_hat_mu);
        let mode = MarchMode::Assimilation { zeta_mu, r };
        let f = marcher.march(Direction::Forward, mode, &traj, Some(&anchors_f), &mut rng)?;
        let b = marcher.march(Direction::Backward, mode, &f.trajectory, Some(&anchors_b), &mut rng)?;
        let (sf, nf) = op.mismatch(&f.trajectory.alpha);
        let (sb, nb) = op.mismatch(&b.trajectory.alpha);
        let mismatch = if nf + nb == 0 { 0.0 } else { (sf + sb) / (nf + nb) as f64 };
        let levels = (f.reports.len() + b.reports.len()).max(1) as f64;
        let reference = relax_state.reference;
        let accepted = relax_state.update(mismatch);
        iterations.push(OuterIteration {
            iteration: attempt,
            r,
            zeta_hat_mu,
            mismatch,
            reference,
            accepted,
            r_next: relax_state.r,
            loss_alpha: (f.term_sums[0] + b.term_sums[0]) / levels,
            loss_mu: (f.term_sums[1] + b.term_sums[1]) / levels,
            loss_obs: (f.term_sums[2] + b.term_sums[2]) / levels,
        });
        info!(
            "outer {attempt}: r {r:.4} mismatch {mismatch:.4e} {}",
            if accepted { "accepted" } else { "rejected" }
        );
        if accepted {
            if cfg.adapt_mu_weights && relax_state.j >= 2 {
                let change = mean_abs_change(&b.trajectory.mu, &traj.mu);
                let d_mu = marcher.weights.ranges.mu;
                for (c, ch) in change.iter().enumerate() {
                    if *ch > 0.1 * d_mu {
                        mu_mult[c] = (mu_mult[c] * 2.0).min(4.0);
                    } else if *ch < 0.01 * d_mu {
                        mu_mult[c] = (mu_mult[c] * 0.5).max(0.25);
                    }
                }
                marcher.weights.w_mu = base_w_mu.iter().zip(&mu_mult).map(|(w, k)| w * k).collect();
            }
            traj = b.trajectory;
            anchors_f = f.z;
            anchors_b = b.z;
            mu_history.push((attempt, traj.mu.clone()));
        }
        if relax_state.converged(cfg.r_converged) {
            converged = true;
            break;
        }
    }

    let mut start = traj.clone();
    start.alpha.truncate(m - 1);
    start.alpha.resize(n_levels, vec![0.0; n_pod]);
    let last = marcher.march(
        Direction::Forward,
        MarchMode::Prediction { zeta_mu: zeta_pred },
        &start,
        Some(&anchors_f),
        &mut rng,
    )?;
    info!(
        "final forward march mismatch {:.4e} (initial {initial_mismatch:.4e}), converged: {converged}",
        last.mismatch
    );
    Ok(Assimilation {
        final_mismatch: last.mismatch,
        trajectory: last.trajectory,
        initial: first.trajectory,
        initial_mismatch,
        iterations,
        mu_history,
        converged,
        final_reports: last.reports,
    })
}
