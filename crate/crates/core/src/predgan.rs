//! Time marching with a window generator: optimise the latent vector so the
//! generated window matches the known levels, then accept the remaining row
//! as the new level.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gan::WindowGenerator;
use crate::pod::NormalizationSpec;
use crate::tensor::{Adam, AdamConfig, AutodiffError, Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum PredError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need {needed} levels, got {got}")]
    TooFewLevels { needed: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Which rows of a window are known: the first `m − 1` when marching
/// forwards (the last row is predicted), the last `m − 1` when marching
/// backwards (the first row is predicted).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    /// Window row of the first known level.
    pub fn known_offset(self) -> usize {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }

    /// Window row that is predicted.
    pub fn predicted_row(self, rows: usize) -> usize {
        match self {
            Direction::Forward => rows - 1,
            Direction::Backward => 0,
        }
    }
}

/// Per-channel affine map from generator units to physical units:
/// `x = scale · y + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowScaling {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl WindowScaling {
    pub fn identity(cols: usize) -> Self {
        Self {
            scale: vec![1.0; cols],
            offset: vec![0.0; cols],
        }
    }

    pub fn from_normalization(n: &NormalizationSpec) -> Self {
        Self {
            scale: n.scale(),
            offset: n.offset(),
        }
    }
}

/// Weights of the prediction functional and the inner optimiser settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredLossConfig {
    /// Diagonal of `W_α`; empty means all ones.
    pub w_alpha: Vec<f64>,
    /// Diagonal of `W_μ`; empty means all ones.
    pub w_mu: Vec<f64>,
    pub zeta_mu: f64,
    pub max_iter: usize,
    /// Stop once the best loss improved by less than `tol · (1 + loss)`
    /// over the last `patience` iterations.
    pub patience: usize,
    pub tol: f64,
    /// Random latent starts tried at the first level.
    pub restarts: usize,
    pub adam: AdamConfig,
    /// When in (0, 1), a plateau multiplies the step size by this factor
    /// (at most `max_decays` times) instead of ending the optimisation.
    pub plateau_decay: f64,
    pub max_decays: usize,
}

impl Default for PredLossConfig {
    fn default() -> Self {
        Self {
            w_alpha: Vec::new(),
            w_mu: Vec::new(),
            zeta_mu: 0.0,
            max_iter: 500,
            patience: 20,
            tol: 1e-6,
            restarts: 4,
            adam: AdamConfig::latent(),
            plateau_decay: 0.0,
            max_decays: 8,
        }
    }
}

impl PredLossConfig {
    pub fn w_alpha(&self, n_pod: usize) -> Vec<f64> {
        if self.w_alpha.is_empty() {
            vec![1.0; n_pod]
        } else {
            self.w_alpha.clone()
        }
    }

    pub fn w_mu(&self, n_mu: usize) -> Vec<f64> {
        if self.w_mu.is_empty() {
            vec![1.0; n_mu]
        } else {
            self.w_mu.clone()
        }
    }
}

/// Observation rows of one window, already mapped into coefficient space:
/// the residual of row `i` is `hb[i] · α(row[i]) + offset[i] − value[i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowObservations {
    /// Known-row index (0-based among the `m − 1` known rows).
    pub row: Vec<usize>,
    pub hb: Vec<Vec<f64>>,
    /// `H ū − u_obs`.
    pub offset: Vec<f64>,
    /// `ζ_obs · w`.
    pub weight: Vec<f64>,
}

impl WindowObservations {
    pub fn len(&self) -> usize {
        self.row.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row.is_empty()
    }
}

/// Everything the window functional needs besides `z`.
#[derive(Clone, Debug)]
pub struct LossInputs {
    /// `[m − 1, n_pod]`, physical units.
    pub known_alpha: Tensor,
    /// `[m − 1, n_mu]`.
    pub known_mu: Tensor,
    pub w_alpha: Tensor,
    /// `ζ_μ` times the diagonal of `W_μ`.
    pub w_mu: Tensor,
    obs_select: Tensor,
    obs_hb: Tensor,
    obs_offset: Tensor,
    obs_weight: Tensor,
}

impl LossInputs {
    pub fn new(
        known_alpha: &[Vec<f64>],
        known_mu: &[Vec<f64>],
        w_alpha: &[f64],
        w_mu: &[f64],
        zeta_mu: f64,
        obs: &WindowObservations,
    ) -> Result<Self, PredError> {
        let k = known_alpha.len();
        if known_mu.len() != k {
            return Err(PredError::Shape(format!(
                "{k} known α levels but {} known μ levels",
                known_mu.len()
            )));
        }
        let n_pod = w_alpha.len();
        let n_mu = w_mu.len();
        if known_alpha.iter().any(|a| a.len() != n_pod) || known_mu.iter().any(|m| m.len() != n_mu) {
            return Err(PredError::Shape("known level width does not match weights".into()));
        }
        // A single zero-weight row stands in for "no observations".
        let r = obs.len().max(1);
        let mut select = vec![0.0; r * k];
        let mut hb = vec![0.0; r * n_pod];
        let mut offset = vec![0.0; r];
        let mut weight = vec![0.0; r];
        for i in 0..obs.len() {
            if obs.row[i] >= k || obs.hb[i].len() != n_pod {
                return Err(PredError::Shape(format!("observation row {i} out of range")));
            }
            select[i * k + obs.row[i]] = 1.0;
            hb[i * n_pod..(i + 1) * n_pod].copy_from_slice(&obs.hb[i]);
            offset[i] = obs.offset[i];
            weight[i] = obs.weight[i];
        }
        Ok(Self {
            known_alpha: Tensor::matrix(k, n_pod, known_alpha.concat())?,
            known_mu: Tensor::matrix(k, n_mu, known_mu.concat())?,
            w_alpha: Tensor::vector(w_alpha.to_vec()),
            w_mu: Tensor::vector(w_mu.iter().map(|w| zeta_mu * w).collect()),
            obs_select: Tensor::matrix(r, k, select)?,
            obs_hb: Tensor::matrix(r, n_pod, hb)?,
            obs_offset: Tensor::matrix(r, 1, offset)?,
            obs_weight: Tensor::matrix(r, 1, weight)?,
        })
    }
}

/// The window functional
/// `Σ (α̃−α)ᵀW_α(α̃−α) + ζ_μ Σ (μ̃−μ)ᵀW_μ(μ̃−μ) + Σ ζ_obs w (Hα + Hū − u_obs)²`
/// over the known rows, as a differentiable graph of `z`.
pub struct LossGraph {
    graph: Graph,
    loss: Var,
    terms: [Var; 3],
    window: Var,
    rows: usize,
    cols: usize,
    n_pod: usize,
    latent_dim: usize,
    pub direction: Direction,
}

impl LossGraph {
    pub fn new(
        generator: &dyn WindowGenerator,
        scaling: &WindowScaling,
        n_pod: usize,
        direction: Direction,
    ) -> Self {
        let (rows, cols) = (generator.rows(), generator.cols());
        assert!(n_pod < cols, "window needs room for the model parameters");
        let mut g = Graph::new();
        let z = g.input("z");
        let flat = generator.build(&mut g, z);
        let win = g.reshape(flat, &[rows, cols]);
        let scale = g.constant(Tensor::vector(scaling.scale.clone()));
        let offset = g.constant(Tensor::vector(scaling.offset.clone()));
        let phys = g.mul_row(win, scale);
        let phys = g.add_row(phys, offset);

        let first = direction.known_offset();
        let known = g.slice(phys, 0, first, first + rows - 1);
        let alpha = g.slice(known, 1, 0, n_pod);
        let mu = g.slice(known, 1, n_pod, cols);

        let ka = g.input("known_alpha");
        let da = g.sub(alpha, ka);
        let sa = g.mul(da, da);
        let wa = g.input("w_alpha");
        let sa = g.mul_row(sa, wa);
        let l_alpha = g.sum(sa);

        let km = g.input("known_mu");
        let dm = g.sub(mu, km);
        let sm = g.mul(dm, dm);
        let wm = g.input("w_mu");
        let sm = g.mul_row(sm, wm);
        let l_mu = g.sum(sm);

        let sel = g.input("obs_select");
        let hb = g.input("obs_hb");
        let picked = g.matmul(sel, alpha);
        let proj = g.mul(picked, hb);
        let ones = g.constant(Tensor::ones(&[n_pod, 1]));
        let hu = g.matmul(proj, ones);
        let off = g.input("obs_offset");
        let res = g.add(hu, off);
        let sq = g.mul(res, res);
        let w = g.input("obs_weight");
        let sq = g.mul(sq, w);
        let l_obs = g.sum(sq);

        let l = g.add(l_alpha, l_mu);
        let loss = g.add(l, l_obs);
        Self {
            graph: g,
            loss,
            terms: [l_alpha, l_mu, l_obs],
            window: phys,
            rows,
            cols,
            n_pod,
            latent_dim: generator.latent_dim(),
            direction,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_pod(&self) -> usize {
        self.n_pod
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn run(&mut self, z: &[f64], x: &LossInputs) -> Result<(), PredError> {
        if z.len() != self.latent_dim {
            return Err(PredError::Shape(format!(
                "latent of length {}, generator expects {}",
                z.len(),
                self.latent_dim
            )));
        }
        let zt = Tensor::matrix(1, z.len(), z.to_vec())?;
        self.graph.forward(&[
            ("z", &zt),
            ("known_alpha", &x.known_alpha),
            ("known_mu", &x.known_mu),
            ("w_alpha", &x.w_alpha),
            ("w_mu", &x.w_mu),
            ("obs_select", &x.obs_select),
            ("obs_hb", &x.obs_hb),
            ("obs_offset", &x.obs_offset),
            ("obs_weight", &x.obs_weight),
        ])?;
        Ok(())
    }

    pub fn loss(&mut self, z: &[f64], x: &LossInputs) -> Result<f64, PredError> {
        self.run(z, x)?;
        Ok(self.graph.value(self.loss)?.item())
    }

    pub fn loss_and_grad(&mut self, z: &[f64], x: &LossInputs) -> Result<(f64, Vec<f64>), PredError> {
        self.run(z, x)?;
        let l = self.graph.value(self.loss)?.item();
        let mut grads = self.graph.backward(self.loss)?;
        let g = grads.take("z").expect("z is an input").into_data();
        Ok((l, g))
    }

    /// `(α term, μ term, observation term)` of the last evaluation.
    pub fn terms(&self) -> Result<[f64; 3], PredError> {
        let mut out = [0.0; 3];
        for (o, v) in out.iter_mut().zip(self.terms) {
            *o = self.graph.value(v)?.item();
        }
        Ok(out)
    }

    /// Physical window `[rows][cols]` of the last evaluation.
    pub fn window(&self) -> Result<Vec<Vec<f64>>, PredError> {
        let t = self.graph.value(self.window)?;
        Ok(t.data().chunks(self.cols).map(<[f64]>::to_vec).collect())
    }
}

/// The prediction functional at `z` for a forward window whose first
/// `m − 1` rows are known.
pub fn prediction_loss(
    generator: &dyn WindowGenerator,
    scaling: &WindowScaling,
    z: &[f64],
    known_alpha: &[Vec<f64>],
    known_mu: &[Vec<f64>],
    cfg: &PredLossConfig,
) -> Result<f64, PredError> {
    let rows = generator.rows();
    if known_alpha.len() != rows - 1 {
        return Err(PredError::TooFewLevels {
            needed: rows - 1,
            got: known_alpha.len(),
        });
    }
    let n_pod = known_alpha[0].len();
    let n_mu = generator.cols() - n_pod;
    let inputs = LossInputs::new(
        known_alpha,
        known_mu,
        &cfg.w_alpha(n_pod),
        &cfg.w_mu(n_mu),
        cfg.zeta_mu,
        &WindowObservations::default(),
    )?;
    LossGraph::new(generator, scaling, n_pod, Direction::Forward).loss(z, &inputs)
}

/// Result of one latent optimisation.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFit {
    pub z: Vec<f64>,
    pub loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Adam on `z` from `z0`, keeping the best iterate seen.
pub fn optimize_latent(
    lg: &mut LossGraph,
    inputs: &LossInputs,
    z0: &[f64],
    cfg: &PredLossConfig,
) -> Result<LatentFit, PredError> {
    let mut adam = Adam::new(cfg.adam);
    let mut z = vec![Tensor::vector(z0.to_vec())];
    let mut best_z = z0.to_vec();
    let mut best = f64::INFINITY;
    let mut initial = f64::NAN;
    let mut best_trace = Vec::with_capacity(cfg.max_iter + 1);
    let mut converged = false;
    let mut iterations = 0;
    let mut decays = 0;
    let mut window_start = 0;
    loop {
        let (l, g) = lg.loss_and_grad(z[0].data(), inputs)?;
        if iterations == 0 {
            initial = l;
        }
        if l < best {
            best = l;
            best_z.copy_from_slice(z[0].data());
        }
        best_trace.push(best);
        if iterations >= window_start + cfg.patience {
            let before = best_trace[iterations - cfg.patience];
            if before - best <= cfg.tol * (1.0 + best) {
                if cfg.plateau_decay > 0.0 && cfg.plateau_decay < 1.0 && decays < cfg.max_decays {
                    adam.config.lr *= cfg.plateau_decay;
                    decays += 1;
                    window_start = iterations;
                } else {
                    converged = true;
                    break;
                }
            }
        }
        if iterations >= cfg.max_iter {
            break;
        }
        let gt = Tensor::vector(g);
        adam.step(&mut z, &[&gt])?;
        iterations += 1;
    }
    Ok(LatentFit {
        z: best_z,
        loss: best,
        initial_loss: initial,
        iterations,
        converged,
    })
}

/// Standard-normal latent vector.
pub fn random_latent(rng: &mut impl rand::Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Per-level record of a march.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Marching state: the latest `m − 1` accepted levels, the known model
/// parameters for every level, and the current latent vector.
#[derive(Clone, Debug)]
pub struct PredictionState {
    pub ring: VecDeque<Vec<f64>>,
    pub mu_schedule: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    /// Index of the next level to predict.
    pub n: usize,
}

impl PredictionState {
    pub fn new(initial: &[Vec<f64>], mu_schedule: Vec<Vec<f64>>, z: Vec<f64>) -> Self {
        Self {
            ring: initial.iter().cloned().collect(),
            n: initial.len(),
            mu_schedule,
            z,
        }
    }
}

/// One forward step: fit the known levels from `state.z` and append the
/// predicted level. Returns the accepted `α` and `μ` rows.
pub fn predict_next(
    lg: &mut LossGraph,
    state: &mut PredictionState,
    cfg: &PredLossConfig,
) -> Result<(Vec<f64>, Vec<f64>, LevelReport), PredError> {
    let rows = lg.rows();
    if state.ring.len() != rows - 1 {
        return Err(PredError::TooFewLevels {
            needed: rows - 1,
            got: state.ring.len(),
        });
    }
    let n = state.n;
    if state.mu_schedule.len() < n {
        return Err(PredError::TooFewLevels {
            needed: n,
            got: state.mu_schedule.len(),
        });
    }
    let n_mu = lg.cols() - lg.n_pod();
    let known_alpha: Vec<Vec<f64>> = state.ring.iter().cloned().collect();
    let known_mu = &state.mu_schedule[n + 1 - rows..n];
    let inputs = LossInputs::new(
        &known_alpha,
        known_mu,
        &cfg.w_alpha(lg.n_pod()),
        &cfg.w_mu(n_mu),
        cfg.zeta_mu,
        &WindowObservations::default(),
    )?;
    let fit = optimize_latent(lg, &inputs, &state.z, cfg)?;
    lg.loss(&fit.z, &inputs)?;
    let row = &lg.window()?[rows - 1];
    let alpha = row[..lg.n_pod()].to_vec();
    let mu = row[lg.n_pod()..].to_vec();
    state.ring.pop_front();
    state.ring.push_back(alpha.clone());
    state.z = fit.z;
    state.n += 1;
    Ok((
        alpha,
        mu,
        LevelReport {
            level: n,
            loss: fit.loss,
            initial_loss: fit.initial_loss,
            iterations: fit.iterations,
            converged: fit.converged,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `α` at every level, the initial ones included.
    pub alpha: Vec<Vec<f64>>,
    /// Generated `μ` rows of predicted levels (known `μ` for initial ones).
    pub mu: Vec<Vec<f64>>,
    /// Latent vector that produced each level (`None` for initial levels).
    pub z: Vec<Option<Vec<f64>>>,
    pub reports: Vec<LevelReport>,
}

impl Rollout {
    pub fn all_converged(&self) -> bool {
        self.reports.iter().all(|r| r.converged)
    }
}

/// Best of `cfg.restarts` random starts (at least one) for the first level.
pub fn initial_latent(
    lg: &mut LossGraph,
    inputs: &LossInputs,
    cfg: &PredLossConfig,
    rng: &mut impl rand::Rng,
) -> Result<LatentFit, PredError> {
    let mut best: Option<LatentFit> = None;
    for _ in 0..cfg.restarts.max(1) {
        let z0 = random_latent(rng, lg.latent_dim());
        let fit = optimize_latent(lg, inputs, &z0, cfg)?;
        if best.as_ref().is_none_or(|b| fit.loss < b.loss) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// March forwards from the `m − 1` initial levels until `n_levels` levels
/// exist. `mu_schedule` gives the known parameters for every level.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    generator: &dyn WindowGenerator,
    scaling: &WindowScaling,
    n_pod: usize,
    initial: &[Vec<f64>],
    mu_schedule: &[Vec<f64>],
    n_levels: usize,
    cfg: &PredLossConfig,
    seed: u64,
) -> Result<Rollout, PredError> {
    let rows = generator.rows();
    if initial.len() != rows - 1 {
        return Err(PredError::TooFewLevels {
            needed: rows - 1,
            got: initial.len(),
        });
    }
    if n_levels < rows - 1 || mu_schedule.len() < n_levels {
        return Err(PredError::TooFewLevels {
            needed: n_levels.max(rows - 1),
            got: mu_schedule.len(),
        });
    }
    let mut out = Rollout {
        alpha: initial.to_vec(),
        mu: mu_schedule[..rows - 1].to_vec(),
        z: vec![None; rows - 1],
        reports: Vec::new(),
    };
    if n_levels == rows - 1 {
        return Ok(out);
    }

    let mut lg = LossGraph::new(generator, scaling, n_pod, Direction::Forward);
    let n_mu = generator.cols() - n_pod;
    let inputs = LossInputs::new(
        initial,
        &mu_schedule[..rows - 1],
        &cfg.w_alpha(n_pod),
        &cfg.w_mu(n_mu),
        cfg.zeta_mu,
        &WindowObservations::default(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = initial_latent(&mut lg, &inputs, cfg, &mut rng)?;
    let mut state = PredictionState::new(initial, mu_schedule[..n_levels].to_vec(), start.z);
    while state.n < n_levels {
        let (alpha, mu, report) = predict_next(&mut lg, &mut state, cfg)?;
        out.alpha.push(alpha);
        out.mu.push(mu);
        out.z.push(Some(state.z.clone()));
        out.reports.push(report);
    }
    Ok(out)
}
