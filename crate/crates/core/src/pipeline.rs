//! End-to-end experiment steps shared by the command-line tool and the
//! acceptance suite: ensemble generation, training, surrogate rollout,
//! observation synthesis, assimilation and plot-data export.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{sha256_hex, ContainerError};
use crate::da::{
    self, assimilate, compute_weights, Assimilation, DaConfig, DaError, DaTrajectory, LevelMap,
    ObsGroup, ObservationOperator, ObservationSet, ObservationSpec, Ranges,
};
use crate::epi::{
    make_initial_field, Compartment, EpiParams, Grid, Group, SimError, Simulator, Snapshots,
    SolverConfig, TransportParams, T_DAY,
};
use crate::gan::{
    self, fit_normalization, make_training_windows, CoefficientSeries, GanConfig, GanError,
    GanModel, TrainOptions, TrainingHistory,
};
use crate::pod::{build_basis, PodBasis, PodError};
use crate::predgan::{rollout, LevelReport, PredError, PredLossConfig, Rollout, WindowScaling};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pod(#[from] PodError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Pred(#[from] PredError),
    #[error(transparent)]
    Da(#[from] DaError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Stable machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::MissingArtifact(_) => "missing_artifact",
            PipelineError::Invalid(_) => "invalid",
            PipelineError::Sim(_) => "simulation",
            PipelineError::Pod(_) => "pod",
            PipelineError::Gan(_) => "gan",
            PipelineError::Pred(_) => "prediction",
            PipelineError::Da(_) => "assimilation",
            PipelineError::Container(_) => "container",
            PipelineError::Csv(_) => "csv",
            PipelineError::Json(_) => "json",
            PipelineError::Io { .. } => "io",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn require(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact(path.to_path_buf()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Cells along each side of one region block.
    pub cells_per_block: usize,
    /// Cell edge length in metres.
    pub cell_size: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cells_per_block: 2,
            cell_size: 10_000.0,
        }
    }
}

impl GridConfig {
    pub fn grid(&self) -> Grid {
        Grid::town_with_resolution(self.cells_per_block, self.cell_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpiConfig {
    /// Rates; the reproduction numbers here are replaced per run.
    pub rates: EpiParams,
    pub population_per_home_cell: f64,
    pub exposed_fraction: f64,
    /// Time step in seconds.
    pub dt: f64,
    pub days: f64,
    /// Reproduction numbers of ensemble members are drawn from `U(min, max)`.
    pub r0_min: f64,
    pub r0_max: f64,
    pub transport: TransportParams,
    pub solver: SolverConfig,
}

impl Default for EpiConfig {
    fn default() -> Self {
        Self {
            rates: EpiParams::covid(0.0, 0.0),
            population_per_home_cell: 2000.0,
            exposed_fraction: 1e-3,
            dt: 4000.0,
            days: 45.5,
            r0_min: 0.0,
            r0_max: 20.0,
            transport: TransportParams::town_default(),
            solver: SolverConfig::default(),
        }
    }
}

impl EpiConfig {
    pub fn n_steps(&self) -> usize {
        (self.days * T_DAY / self.dt).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub members: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { members: 40 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub n_pod: usize,
    /// Levels per window.
    pub m: usize,
    /// Stored levels between window rows.
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            n_pod: 15,
            m: 10,
            stride: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    pub loss: PredLossConfig,
    /// Stored level of the first marching level.
    pub start_level: usize,
    /// Marching levels to produce, the initial ones included; 0 means up to
    /// the end of the run.
    pub n_levels: usize,
    /// `ζ̂_μ` of prediction-mode marches.
    pub zeta_hat_mu: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            loss: PredLossConfig::default(),
            start_level: 0,
            n_levels: 0,
            zeta_hat_mu: 1e-2,
        }
    }
}

/// Which fields the synthetic observations measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservedFields {
    /// All four compartments of both groups.
    All,
    /// Infectious people, home and mobile summed.
    InfectiousTotal,
    /// Infectious people of each group separately.
    InfectiousPerGroup,
}

impl ObservedFields {
    pub fn fields(self) -> Vec<(ObsGroup, Compartment)> {
        match self {
            ObservedFields::All => [ObsGroup::Home, ObsGroup::Mobile]
                .iter()
                .flat_map(|&g| Compartment::ALL.iter().map(move |&c| (g, c)))
                .collect(),
            ObservedFields::InfectiousTotal => vec![(ObsGroup::Total, Compartment::I)],
            ObservedFields::InfectiousPerGroup => vec![
                (ObsGroup::Home, Compartment::I),
                (ObsGroup::Mobile, Compartment::I),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationConfig {
    /// Regions observed at their bottom-left cell.
    pub regions: Vec<u8>,
    pub fields: ObservedFields,
    /// Days between observation times; 0 observes every marching level.
    pub every_days: f64,
    pub noise: f64,
    pub weight: f64,
    /// Reproduction numbers of the run that plays the truth.
    pub truth_r0: [f64; 2],
    /// Reproduction numbers of the run that provides the starting guess.
    pub guess_r0: [f64; 2],
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            regions: vec![2, 3, 4, 5, 6],
            fields: ObservedFields::All,
            every_days: 0.0,
            noise: 0.05,
            weight: 1.0,
            truth_r0: [7.7, 17.4],
            guess_r0: [6.5, 5.7],
        }
    }
}

impl ObservationConfig {
    /// Infectious totals every two days.
    pub fn realistic() -> Self {
        Self {
            fields: ObservedFields::InfectiousTotal,
            every_days: 2.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub epi: EpiConfig,
    pub ensemble: EnsembleConfig,
    pub windows: WindowConfig,
    pub gan: GanConfig,
    pub predict: PredictConfig,
    pub assimilation: DaConfig,
    pub observations: ObservationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridConfig::default(),
            epi: EpiConfig::default(),
            ensemble: EnsembleConfig::default(),
            windows: WindowConfig::default(),
            gan: GanConfig::default(),
            predict: PredictConfig::default(),
            assimilation: DaConfig::default(),
            observations: ObservationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let w = &self.windows;
        if w.m < 2 || w.stride == 0 || w.n_pod == 0 {
            return Err(PipelineError::Config(format!(
                "windows need m >= 2, stride >= 1, n_pod >= 1 (got {}, {}, {})",
                w.m, w.stride, w.n_pod
            )));
        }
        if self.gan.window_rows != w.m || self.gan.window_cols != w.n_pod + 2 {
            return Err(PipelineError::Config(format!(
                "gan window {}x{} does not match m = {} and n_pod + 2 = {}",
                self.gan.window_rows,
                self.gan.window_cols,
                w.m,
                w.n_pod + 2
            )));
        }
        if !(self.epi.dt > 0.0 && self.epi.days > 0.0) || self.epi.r0_min > self.epi.r0_max {
            return Err(PipelineError::Config("epi time or R0 range invalid".into()));
        }
        Ok(())
    }

    /// Marching lattice over a run of `n_stored` levels.
    pub fn level_map(&self, n_stored: usize) -> Result<LevelMap, PipelineError> {
        let start = self.predict.start_level;
        if start >= n_stored {
            return Err(PipelineError::Invalid(format!(
                "start level {start} beyond the {n_stored} stored levels"
            )));
        }
        let available = (n_stored - 1 - start) / self.windows.stride + 1;
        let n_levels = match self.predict.n_levels {
            0 => available,
            n => n.min(available),
        };
        Ok(LevelMap {
            start,
            stride: self.windows.stride,
            n_levels,
        })
    }
}

/// One high-fidelity run with the given reproduction numbers.
pub fn simulate(cfg: &ExperimentConfig, r0: [f64; 2], seed: Option<u64>) -> Result<Snapshots, PipelineError> {
    let grid = cfg.grid.grid();
    let params = cfg.epi.rates.with_r0(r0);
    let sim = Simulator::new(&grid, &params, &cfg.epi.transport, cfg.epi.solver)?;
    let initial = make_initial_field(&grid, cfg.epi.population_per_home_cell, cfg.epi.exposed_fraction)?;
    let traj = sim.run(&initial, cfg.epi.dt, cfg.epi.n_steps())?;
    Ok(Snapshots::from_trajectory(&grid, &params, &cfg.epi.transport, &traj, seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub index: usize,
    pub r0: [f64; 2],
    pub file: Option<String>,
    pub digest: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub seed: u64,
    pub members: Vec<MemberRecord>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(Self::FILE);
        require(&path)?;
        Ok(serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)?)
    }

    /// Snapshots of every successful member.
    pub fn load_members(&self, dir: &Path) -> Result<Vec<Snapshots>, PipelineError> {
        self.members
            .iter()
            .filter_map(|m| m.file.as_ref())
            .map(|f| {
                let path = dir.join(f);
                require(&path)?;
                Ok(Snapshots::load(&path)?)
            })
            .collect()
    }
}

/// Reproduction-number pairs of the ensemble, drawn from `U(r0_min, r0_max)²`.
pub fn sample_r0_pairs(cfg: &ExperimentConfig) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = (cfg.epi.r0_min, cfg.epi.r0_max);
    (0..cfg.ensemble.members)
        .map(|_| [rng.random_range(lo..=hi), rng.random_range(lo..=hi)])
        .collect()
}

/// Run the ensemble and write `member_{i}.dpgc` files plus a manifest.
/// A failing member is recorded in the manifest and skipped.
pub fn generate_ensemble(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest, PipelineError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let pairs = sample_r0_pairs(cfg);
    let members: Vec<MemberRecord> = pairs
        .par_iter()
        .enumerate()
        .map(|(index, &r0)| match simulate(cfg, r0, Some(cfg.seed)) {
            Ok(snap) => {
                let file = format!("member_{index:03}.dpgc");
                let c = snap.to_container().with_meta("config_digest", cfg.digest());
                let bytes = c.to_bytes();
                let digest = sha256_hex(&bytes);
                match fs::write(out_dir.join(&file), bytes) {
                    Ok(()) => MemberRecord {
                        index,
                        r0,
                        file: Some(file),
                        digest: Some(digest),
                        error: None,
                    },
                    Err(e) => MemberRecord {
                        index,
                        r0,
                        file: None,
                        digest: None,
                        error: Some(e.to_string()),
                    },
                }
            }
            Err(e) => {
                warn!("member {index} ({r0:?}) failed: {e}");
                MemberRecord {
                    index,
                    r0,
                    file: None,
                    digest: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let manifest = Manifest {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        members,
    };
    write_file(
        &out_dir.join(Manifest::FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// POD coefficients of every stored level of `snap`, with its reproduction
/// numbers as the model parameters.
pub fn coefficient_series(basis: &PodBasis, snap: &Snapshots) -> Result<CoefficientSeries, PipelineError> {
    let alpha = snap
        .states
        .iter()
        .map(|s| basis.project(s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CoefficientSeries {
        alpha,
        mu: vec![snap.header.params.r0_home, snap.header.params.r0_mobile],
    })
}

/// Basis, trained model (carrying its normalisation) and loss history.
pub struct Trained {
    pub basis: PodBasis,
    pub model: GanModel,
    pub history: TrainingHistory,
}

/// Build the basis from every stored level of every member, normalise the
/// coefficient windows and train the network.
pub fn train_surrogate(
    cfg: &ExperimentConfig,
    members: &[Snapshots],
    opts: &TrainOptions,
) -> Result<Trained, PipelineError> {
    if members.is_empty() {
        return Err(PipelineError::Invalid("empty ensemble".into()));
    }
    let snapshots: Vec<Vec<f64>> = members.iter().flat_map(|m| m.states.iter().cloned()).collect();
    let basis = build_basis(&snapshots, cfg.windows.n_pod)?;
    info!(
        "basis: {} modes capture {:.8} of the variance",
        basis.n_pod,
        basis.captured_variance(basis.n_pod)
    );
    let series = members
        .iter()
        .map(|m| coefficient_series(&basis, m))
        .collect::<Result<Vec<_>, _>>()?;
    let norm = fit_normalization(&series)?;
    let windows = make_training_windows(&series, cfg.windows.m, cfg.windows.stride, &norm);
    info!("{} training windows", windows.len());
    let mut model = GanModel::new(cfg.gan.clone());
    model.normalization = Some(norm);
    let history = gan::train(&mut model, &windows, opts)?;
    Ok(Trained {
        basis,
        model,
        history,
    })
}

/// `mode, singular_value, energy, cumulative` rows; energies sum to one.
pub fn write_variance_csv(basis: &PodBasis, path: &Path) -> Result<(), PipelineError> {
    let total: f64 = basis.singular_values.iter().map(|s| s * s).sum();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "singular_value", "energy", "cumulative"])?;
    let mut cum = 0.0;
    for (i, s) in basis.singular_values.iter().enumerate() {
        let e = s * s / total;
        cum += e;
        w.write_record([i.to_string(), s.to_string(), e.to_string(), cum.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

pub const BASIS_FILE: &str = "basis.dpgc";
pub const MODEL_FILE: &str = "gan.dpgc";

/// Write basis, checkpoint, loss history and variance curve into `dir`.
pub fn save_trained(cfg: &ExperimentConfig, t: &Trained, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    t.basis
        .to_container()
        .with_meta("config_digest", cfg.digest())
        .save(&dir.join(BASIS_FILE))?;
    t.model
        .to_container()
        .with_meta("experiment_digest", cfg.digest())
        .with_meta("basis_digest", t.basis.to_container().digest())
        .save(&dir.join(MODEL_FILE))?;
    t.history.write_csv(&dir.join("history.csv"))?;
    write_variance_csv(&t.basis, &dir.join("variance.csv"))?;
    Ok(())
}

pub fn load_trained(dir: &Path) -> Result<(PodBasis, GanModel), PipelineError> {
    let (b, m) = (dir.join(BASIS_FILE), dir.join(MODEL_FILE));
    require(&b)?;
    require(&m)?;
    Ok((PodBasis::load(&b)?, GanModel::load(&m)?))
}

/// Generator-to-physical scaling of a trained model.
pub fn scaling_of(model: &GanModel) -> Result<WindowScaling, PipelineError> {
    model
        .normalization
        .as_ref()
        .map(WindowScaling::from_normalization)
        .ok_or_else(|| PipelineError::Invalid("checkpoint carries no normalisation".into()))
}

/// Assimilation weights from the training ranges and the configured diagonals.
pub fn da_weights(cfg: &ExperimentConfig, basis: &PodBasis, model: &GanModel) -> Result<da::DaWeights, PipelineError> {
    let norm = model
        .normalization
        .as_ref()
        .ok_or_else(|| PipelineError::Invalid("checkpoint carries no normalisation".into()))?;
    let n_pod = basis.n_pod;
    let n_mu = norm.n_channels() - n_pod;
    let ranges = Ranges::from_training(norm, n_pod, basis);
    let pred = &cfg.assimilation.pred;
    Ok(compute_weights(
        cfg.assimilation.zeta_hat_obs,
        ranges,
        pred.w_alpha(n_pod),
        pred.w_mu(n_mu),
    )?)
}

/// Surrogate trajectory with per-level diagnostics.
pub struct Prediction {
    pub levels: LevelMap,
    pub rollout: Rollout,
    /// Reconstructed states at each marching level.
    pub states: Vec<Vec<f64>>,
    /// `‖u − u_true‖ / ‖u_true‖` per level, when the truth is known.
    pub rel_l2: Option<Vec<f64>>,
}

impl Prediction {
    pub fn mean_rel_l2(&self) -> Option<f64> {
        self.rel_l2
            .as_ref()
            .map(|e| e.iter().sum::<f64>() / e.len().max(1) as f64)
    }

    pub fn write_report_csv(&self, path: &Path) -> Result<(), PipelineError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["level", "stored_level", "loss", "initial_loss", "iterations", "converged"];
        if self.rel_l2.is_some() {
            header.push("rel_l2");
        }
        w.write_record(&header)?;
        let k = self.rollout.alpha.len() - self.rollout.reports.len();
        for l in 0..self.rollout.alpha.len() {
            let mut rec = vec![l.to_string(), self.levels.stored(l).to_string()];
            match l.checked_sub(k).map(|i| &self.rollout.reports[i]) {
                Some(r) => rec.extend([
                    r.loss.to_string(),
                    r.initial_loss.to_string(),
                    r.iterations.to_string(),
                    r.converged.to_string(),
                ]),
                None => rec.extend(["".into(), "".into(), "0".into(), "true".into()]),
            }
            if let Some(e) = &self.rel_l2 {
                rec.push(e[l].to_string());
            }
            w.write_record(rec)?;
        }
        w.flush().map_err(io_err(path))
    }
}

fn rel_l2(a: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(truth).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = truth.iter().map(|y| y * y).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// `ζ_μ` of prediction-mode marches.
pub fn prediction_zeta_mu(cfg: &ExperimentConfig, basis: &PodBasis, model: &GanModel) -> Result<f64, PipelineError> {
    Ok(da_weights(cfg, basis, model)?.zeta_mu(cfg.predict.zeta_hat_mu))
}

/// Roll the surrogate out from the first `m − 1` marching levels of `source`
/// with reproduction numbers `r0`. Errors against `truth` are reported when
/// given.
pub fn predict(
    cfg: &ExperimentConfig,
    basis: &PodBasis,
    model: &GanModel,
    source: &Snapshots,
    r0: [f64; 2],
    truth: Option<&Snapshots>,
) -> Result<Prediction, PipelineError> {
    let levels = cfg.level_map(source.states.len())?;
    let m = model.config.window_rows;
    if levels.n_levels < m - 1 {
        return Err(PipelineError::Invalid(format!(
            "{} marching levels cannot hold the {} initial levels",
            levels.n_levels,
            m - 1
        )));
    }
    let initial = (0..m - 1)
        .map(|l| basis.project(&source.states[levels.stored(l)]))
        .collect::<Result<Vec<_>, _>>()?;
    let mu = vec![r0.to_vec(); levels.n_levels];
    let mut loss = cfg.predict.loss.clone();
    loss.zeta_mu = prediction_zeta_mu(cfg, basis, model)?;
    let ro = rollout(
        model,
        &scaling_of(model)?,
        basis.n_pod,
        &initial,
        &mu,
        levels.n_levels,
        &loss,
        cfg.seed,
    )?;
    let states = ro
        .alpha
        .iter()
        .map(|a| basis.reconstruct(a))
        .collect::<Result<Vec<_>, _>>()?;
    let rel = truth.map(|t| {
        states
            .iter()
            .enumerate()
            .map(|(l, u)| rel_l2(u, &t.states[levels.stored(l)]))
            .collect()
    });
    Ok(Prediction {
        levels,
        rollout: ro,
        states,
        rel_l2: rel,
    })
}

/// Store marching-level states in the snapshot format.
pub fn trajectory_snapshots(
    cfg: &ExperimentConfig,
    levels: &LevelMap,
    states: Vec<Vec<f64>>,
    r0: [f64; 2],
) -> Snapshots {
    let grid = cfg.grid.grid();
    let dt = cfg.epi.dt * levels.stride as f64;
    let transport = cfg.epi.transport.clone();
    let header = crate::epi::SnapshotHeader {
        nx: grid.nx,
        ny: grid.ny,
        cell_size: grid.cell_size,
        dt,
        n_steps: states.len().saturating_sub(1),
        params: cfg.epi.rates.with_r0(r0),
        transport_digest: transport.digest(),
        transport,
        seed: Some(cfg.seed),
    };
    Snapshots {
        header,
        region_map: grid.region_map.clone(),
        times: (0..states.len())
            .map(|l| levels.stored(l) as f64 * cfg.epi.dt)
            .collect(),
        states,
    }
}

/// Observation cells: the bottom-left cell of each configured region.
pub fn observation_cells(cfg: &ExperimentConfig) -> Result<Vec<(usize, usize)>, PipelineError> {
    let grid = cfg.grid.grid();
    cfg.observations
        .regions
        .iter()
        .map(|&r| {
            grid.bottom_left_of(r)
                .map(|c| grid.coords(c))
                .ok_or_else(|| PipelineError::Config(format!("region {r} has no cells")))
        })
        .collect()
}

/// Observation times on the marching lattice of `truth`.
pub fn observation_levels(cfg: &ExperimentConfig, n_stored: usize) -> Result<Vec<usize>, PipelineError> {
    let lm = cfg.level_map(n_stored)?;
    let every = cfg.observations.every_days;
    if every <= 0.0 {
        return Ok((0..lm.n_levels).map(|l| lm.stored(l)).collect());
    }
    let horizon = lm.stored(lm.n_levels - 1) as f64 * cfg.epi.dt;
    let start = lm.start as f64 * cfg.epi.dt;
    let times: Vec<f64> = (0..)
        .map(|k| start + k as f64 * every * T_DAY)
        .take_while(|t| *t <= horizon + 1e-9)
        .collect();
    Ok(lm.nearest_levels(cfg.epi.dt, &times))
}

/// Synthetic noisy observations of `truth`.
pub fn observe(cfg: &ExperimentConfig, truth: &Snapshots, seed: u64) -> Result<ObservationSet, PipelineError> {
    let spec = ObservationSpec {
        cells: observation_cells(cfg)?,
        fields: cfg.observations.fields.fields(),
        levels: observation_levels(cfg, truth.states.len())?,
        noise: cfg.observations.noise,
        weight: cfg.observations.weight,
    };
    Ok(da::synthesize_observations(truth, &spec, seed)?)
}

/// Assimilate `obs` starting from the first `m − 1` marching levels of
/// `guess` and its reproduction numbers.
pub fn run_assimilation(
    cfg: &ExperimentConfig,
    basis: &PodBasis,
    model: &GanModel,
    obs: &ObservationSet,
    guess: &Snapshots,
) -> Result<(LevelMap, Assimilation), PipelineError> {
    let levels = cfg.level_map(guess.states.len())?;
    let m = model.config.window_rows;
    let op = ObservationOperator::new(obs, basis, guess.header.nx, guess.header.ny, &levels)?;
    let weights = da_weights(cfg, basis, model)?;
    let initial = (0..m - 1)
        .map(|l| basis.project(&guess.states[levels.stored(l)]))
        .collect::<Result<Vec<_>, _>>()?;
    let mu = vec![
        vec![guess.header.params.r0_home, guess.header.params.r0_mobile];
        levels.n_levels
    ];
    let result = assimilate(
        model,
        &scaling_of(model)?,
        &op,
        &weights,
        &initial,
        &mu,
        &cfg.assimilation,
        cfg.seed,
    )?;
    Ok((levels, result))
}

/// Write the trajectory, `μ` history and diagnostics of an assimilation.
pub fn save_assimilation(
    cfg: &ExperimentConfig,
    basis: &PodBasis,
    levels: &LevelMap,
    a: &Assimilation,
    dir: &Path,
) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let states = reconstruct_all(basis, &a.trajectory)?;
    let mean_mu = |k: usize| {
        a.trajectory.mu.iter().map(|m| m[k]).sum::<f64>() / a.trajectory.mu.len() as f64
    };
    trajectory_snapshots(cfg, levels, states, [mean_mu(0), mean_mu(1)])
        .to_container()
        .with_meta("config_digest", cfg.digest())
        .save(&dir.join("trajectory.dpgc"))?;
    let initial = reconstruct_all(basis, &a.initial)?;
    trajectory_snapshots(cfg, levels, initial, [mean_mu(0), mean_mu(1)])
        .to_container()
        .with_meta("config_digest", cfg.digest())
        .save(&dir.join("initial_trajectory.dpgc"))?;
    a.write_mu_history(&dir.join("mu_history.csv"))?;
    a.write_mu_iterations(&dir.join("mu_iterations.csv"))?;
    a.write_diagnostics(&dir.join("diagnostics.csv"))?;
    let summary = serde_json::json!({
        "config_digest": cfg.digest(),
        "converged": a.converged,
        "initial_mismatch": a.initial_mismatch,
        "final_mismatch": a.final_mismatch,
        "outer_iterations": a.iterations.len(),
    });
    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)
}

fn reconstruct_all(basis: &PodBasis, t: &DaTrajectory) -> Result<Vec<Vec<f64>>, PipelineError> {
    Ok(t
        .alpha
        .iter()
        .map(|a| basis.reconstruct(a))
        .collect::<Result<Vec<_>, _>>()?)
}

/// Long-format rows `series, day, value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeriesTable {
    pub rows: Vec<(String, f64, f64)>,
}

impl SeriesTable {
    pub fn push(&mut self, series: impl Into<String>, day: f64, value: f64) {
        self.rows.push((series.into(), day, value));
    }

    pub fn series_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for (s, _, _) in &self.rows {
            if !names.contains(s) {
                names.push(s.clone());
            }
        }
        names
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PipelineError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["series", "day", "value"])?;
        for (s, d, v) in &self.rows {
            w.write_record([s.clone(), d.to_string(), v.to_string()])?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// The eight compartment series of one cell; days from the stored times.
pub fn cell_series(snap: &Snapshots, cell: (usize, usize), prefix: &str) -> SeriesTable {
    let n_cells = snap.n_cells();
    let idx = cell.1 * snap.header.nx + cell.0;
    let mut t = SeriesTable::default();
    for g in Group::ALL {
        for c in Compartment::ALL {
            let slot = crate::epi::slot_index(n_cells, g, c, idx);
            for (time, s) in snap.times.iter().zip(&snap.states) {
                t.push(format!("{prefix}{}_{}", g.name(), c.name()), time / T_DAY, s[slot]);
            }
        }
    }
    t
}

/// Emit plot-ready tables for every artifact present in `dir` (training,
/// prediction and assimilation outputs) into `out`. Returns the files written.
pub fn export_plots(cfg: &ExperimentConfig, dir: &Path, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::new();
    let cell = observation_cells(cfg)?.first().copied().unwrap_or((0, 0));
    let mut found = false;

    let variance = [dir.join("variance.csv"), dir.join("model/variance.csv")]
        .into_iter()
        .find(|p| p.exists());
    if let Some(variance) = variance {
        found = true;
        let mut t = SeriesTable::default();
        let mut r = csv::Reader::from_path(&variance)?;
        for rec in r.records() {
            let rec = rec?;
            let mode: f64 = rec[0].parse().map_err(|_| PipelineError::Invalid("variance.csv".into()))?;
            t.push("singular_value", mode, rec[1].parse().unwrap_or(f64::NAN));
            t.push("cumulative_energy", mode, rec[3].parse().unwrap_or(f64::NAN));
        }
        let p = out.join("pod_spectrum.csv");
        t.write_csv(&p)?;
        written.push(p);
    }

    for (name, file) in [
        ("prediction", "prediction.dpgc"),
        ("truth", "truth.dpgc"),
        ("assimilated", "assimilation/trajectory.dpgc"),
        ("first_march", "assimilation/initial_trajectory.dpgc"),
    ] {
        let path = dir.join(file);
        if path.exists() {
            found = true;
            let snap = Snapshots::load(&path)?;
            let p = out.join(format!("{name}_cell_{}_{}.csv", cell.0, cell.1));
            cell_series(&snap, cell, "").write_csv(&p)?;
            written.push(p);
        }
    }

    let diag = dir.join("assimilation/diagnostics.csv");
    if diag.exists() {
        found = true;
        let mut t = SeriesTable::default();
        let mut r = csv::Reader::from_path(&diag)?;
        let headers = r.headers()?.clone();
        for rec in r.records() {
            let rec = rec?;
            let it: f64 = rec[0].parse().unwrap_or(f64::NAN);
            for (h, v) in headers.iter().zip(rec.iter()).skip(1) {
                if let Ok(x) = v.parse::<f64>() {
                    t.push(h, it, x);
                }
            }
        }
        let p = out.join("assimilation_iterations.csv");
        t.write_csv(&p)?;
        written.push(p);
    }
    if !found {
        return Err(PipelineError::MissingArtifact(dir.to_path_buf()));
    }
    Ok(written)
}

/// Per-level relative errors of a prediction as a table.
pub fn error_series(p: &Prediction, dt: f64) -> SeriesTable {
    let mut t = SeriesTable::default();
    if let Some(e) = &p.rel_l2 {
        for (l, v) in e.iter().enumerate() {
            t.push("rel_l2", p.levels.stored(l) as f64 * dt / T_DAY, *v);
        }
    }
    t
}

/// Reports of a rollout as JSON.
pub fn reports_json(reports: &[LevelReport]) -> Result<String, PipelineError> {
    Ok(serde_json::to_string_pretty(reports)?)
}
