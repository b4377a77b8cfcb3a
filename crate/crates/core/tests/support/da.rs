//! Fixtures over a two-cell grid for the assimilation functionals, and a
//! naive re-evaluation of those functionals from their definition.

use dapredgan::da::{compute_weights, DaWeights, LevelMap, ObsGroup, Observation, ObservationSet, Ranges};
use dapredgan::epi::{slot_index, Compartment};
use dapredgan::gan::{GanConfig, GanModel, WindowGenerator};
use dapredgan::pod::PodBasis;
use dapredgan::predgan::{Direction, WindowScaling};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const NX: usize = 2;
pub const NY: usize = 1;
pub const N_CELLS: usize = NX * NY;
pub const N_STATE: usize = 8 * N_CELLS;
pub const N_POD: usize = 3;
pub const N_MU: usize = 2;
pub const M: usize = 4;

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// A basis over the two-cell grid; orthonormality is irrelevant to the
/// functionals.
pub fn random_basis(rng: &mut ChaCha8Rng) -> PodBasis {
    PodBasis {
        n_state: N_STATE,
        n_pod: N_POD,
        basis: random_vec(rng, N_STATE * N_POD, 1.0),
        mean: random_vec(rng, N_STATE, 2.0),
        singular_values: vec![3.0, 2.0, 1.0],
        state_range: (0.0, 1.0),
        ensemble_digest: String::new(),
    }
}

pub fn lattice(n_levels: usize) -> LevelMap {
    LevelMap {
        start: 0,
        stride: 1,
        n_levels,
    }
}

pub fn small_model(seed: u64) -> GanModel {
    GanModel::new(GanConfig {
        latent_dim: 6,
        window_rows: M,
        window_cols: N_POD + N_MU,
        generator_hidden: vec![12, 10],
        discriminator_hidden: vec![4],
        seed,
        ..GanConfig::default()
    })
}

pub fn random_scaling(rng: &mut ChaCha8Rng) -> WindowScaling {
    WindowScaling {
        scale: (0..N_POD + N_MU).map(|_| rng.random_range(0.5..3.0)).collect(),
        offset: random_vec(rng, N_POD + N_MU, 2.0),
    }
}

pub fn fields() -> Vec<(ObsGroup, Compartment)> {
    let mut f = Vec::new();
    for g in [ObsGroup::Home, ObsGroup::Mobile, ObsGroup::Total] {
        for c in Compartment::ALL {
            f.push((g, c));
        }
    }
    f
}

/// Random observations at roughly half of all (level, cell, field) keys.
pub fn random_observations(rng: &mut ChaCha8Rng, n_levels: usize) -> ObservationSet {
    let mut entries = Vec::new();
    for level in 0..n_levels {
        for x in 0..NX {
            for &(group, compartment) in &fields() {
                if rng.random_bool(0.5) {
                    entries.push(Observation {
                        time_level: level,
                        cell_x: x,
                        cell_y: 0,
                        group,
                        compartment,
                        value: rng.random_range(-3.0..3.0),
                        weight: rng.random_range(0.1..2.0),
                    });
                }
            }
        }
    }
    ObservationSet::new(entries).unwrap()
}

pub fn obs(level: usize, x: usize, group: ObsGroup, compartment: Compartment, value: f64, weight: f64) -> Observation {
    Observation {
        time_level: level,
        cell_x: x,
        cell_y: 0,
        group,
        compartment,
        value,
        weight,
    }
}

pub fn random_weights(rng: &mut ChaCha8Rng) -> DaWeights {
    compute_weights(
        10.0,
        Ranges {
            alpha: 2.0,
            mu: 3.0,
            u: 5.0,
        },
        (0..N_POD).map(|_| rng.random_range(0.2..2.0)).collect(),
        (0..N_MU).map(|_| rng.random_range(0.2..2.0)).collect(),
    )
    .unwrap()
}

/// `B α + ū` at every state slot.
pub fn reconstruct(basis: &PodBasis, alpha: &[f64]) -> Vec<f64> {
    (0..N_STATE)
        .map(|s| basis.mean[s] + (0..N_POD).map(|j| basis.basis[s * N_POD + j] * alpha[j]).sum::<f64>())
        .collect()
}

/// Naive re-evaluation of the assimilation functional from its definition.
#[allow(clippy::too_many_arguments)]
pub fn oracle_loss(
    g: &dyn WindowGenerator,
    scaling: &WindowScaling,
    z: &[f64],
    dir: Direction,
    known_alpha: &[Vec<f64>],
    known_mu: &[Vec<f64>],
    first_level: usize,
    set: &ObservationSet,
    basis: &PodBasis,
    weights: &DaWeights,
    zeta_mu: f64,
) -> f64 {
    let w = g.generate(z);
    let offset = match dir {
        Direction::Forward => 0,
        Direction::Backward => 1,
    };
    let window: Vec<Vec<f64>> = (0..M)
        .map(|r| {
            (0..N_POD + N_MU)
                .map(|c| scaling.scale[c] * w.row(r)[c] + scaling.offset[c])
                .collect()
        })
        .collect();
    let in_window = |e: &&Observation| e.weight > 0.0 && e.time_level >= first_level && e.time_level < first_level + M - 1;
    let w_sum: f64 = set.entries.iter().filter(in_window).map(|e| e.weight).sum();
    let ratio = weights.ranges.alpha / weights.ranges.u;
    let zeta_obs = if w_sum > 0.0 {
        weights.zeta_hat_obs * ratio * ratio * (M - 1) as f64 * weights.w_alpha.iter().sum::<f64>() / w_sum
    } else {
        0.0
    };
    let mut total = 0.0;
    for k in 0..M - 1 {
        let row = &window[k + offset];
        for j in 0..N_POD {
            total += weights.w_alpha[j] * (row[j] - known_alpha[k][j]).powi(2);
        }
        for j in 0..N_MU {
            total += zeta_mu * weights.w_mu[j] * (row[N_POD + j] - known_mu[k][j]).powi(2);
        }
    }
    for k in 0..M - 1 {
        let u = reconstruct(basis, &window[k + offset][..N_POD]);
        for e in set.entries.iter().filter(in_window).filter(|e| e.time_level == first_level + k) {
            let cell = e.cell_y * NX + e.cell_x;
            let model: f64 = e.group.groups().iter().map(|&gr| u[slot_index(N_CELLS, gr, e.compartment, cell)]).sum();
            total += zeta_obs * e.weight * (model - e.value).powi(2);
        }
    }
    total
}
