mod support;

use dapredgan::gan::{GanConfig, GanModel, LinearGenerator, WindowGenerator};
use dapredgan::predgan::{
    optimize_latent, predict_next, prediction_loss, rollout, Direction, LossGraph, LossInputs,
    PredLossConfig, PredictionState, WindowObservations, WindowScaling,
};
use dapredgan::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::gradcheck::relative_error;
use support::linear::{dynamics_generator, planted_dynamics, split, trajectory};

const N_POD: usize = 3;
const N_MU: usize = 2;
const M: usize = 4;

/// Tight optimiser settings for exact linear problems.
fn exact_cfg() -> PredLossConfig {
    PredLossConfig {
        zeta_mu: 1.0,
        max_iter: 20000,
        tol: 0.0,
        patience: 50,
        restarts: 1,
        plateau_decay: 0.3,
        max_decays: 10,
        ..PredLossConfig::default()
    }
}

/// Bias-only generator emitting `window` for every latent.
fn constant_generator(window: &[Vec<f64>], nz: usize) -> LinearGenerator {
    let rows = window.len();
    let cols = window[0].len();
    LinearGenerator {
        rows,
        cols,
        weight: Tensor::zeros(&[nz, rows * cols]),
        bias: Tensor::vector(window.concat()),
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn small_model(seed: u64) -> GanModel {
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

fn random_scaling(rng: &mut ChaCha8Rng) -> WindowScaling {
    WindowScaling {
        scale: (0..N_POD + N_MU).map(|_| rng.random_range(0.5..3.0)).collect(),
        offset: random_vec(rng, N_POD + N_MU, 2.0),
    }
}

#[test]
fn loss_zero_when_generator_matches_known_levels() {
    let window: Vec<Vec<f64>> = (0..M).map(|r| vec![r as f64, 0.5, -1.0, 2.0, 7.0]).collect();
    let g = constant_generator(&window, 2);
    let (alpha, mu) = split(&window[..M - 1], N_POD);
    let cfg = PredLossConfig {
        zeta_mu: 3.0,
        ..PredLossConfig::default()
    };
    let l = prediction_loss(&g, &WindowScaling::identity(5), &[0.1, 0.2], &alpha, &mu, &cfg).unwrap();
    assert_eq!(l, 0.0);
}

#[test]
fn loss_ignores_mu_when_zeta_mu_zero() {
    let window: Vec<Vec<f64>> = (0..M).map(|r| vec![r as f64, 0.5, -1.0, 2.0, 7.0]).collect();
    let (alpha, mu) = split(&window[..M - 1], N_POD);
    let cfg = PredLossConfig::default();
    let s = WindowScaling::identity(5);
    let base = prediction_loss(&constant_generator(&window, 1), &s, &[0.0], &alpha, &mu, &cfg).unwrap();
    let mut perturbed = window.clone();
    for row in perturbed.iter_mut() {
        row[3] += 5.0;
        row[4] -= 2.0;
    }
    let l = prediction_loss(&constant_generator(&perturbed, 1), &s, &[0.0], &alpha, &mu, &cfg).unwrap();
    assert_eq!(l, base);
}

#[test]
fn single_known_level_unit_quadratic() {
    // m = 2: one known level; row 1 (the predicted one) must not count.
    let known = vec![0.0, 0.0, 0.0, 1.0, 1.0];
    let window = vec![vec![1.0, 0.0, 0.0, 1.0, 1.0], vec![9.0, 9.0, 9.0, 9.0, 9.0]];
    let g = constant_generator(&window, 1);
    let (alpha, mu) = split(&[known], N_POD);
    let l = prediction_loss(&g, &WindowScaling::identity(5), &[0.0], &alpha, &mu, &PredLossConfig::default())
        .unwrap();
    assert_eq!(l, 1.0);
}

#[test]
fn wrong_number_of_known_levels_is_an_error() {
    let g = small_model(1);
    let alpha = vec![vec![0.0; N_POD]; M - 2];
    let mu = vec![vec![0.0; N_MU]; M - 2];
    let s = WindowScaling::identity(N_POD + N_MU);
    assert!(prediction_loss(&g, &s, &[0.0; 6], &alpha, &mu, &PredLossConfig::default()).is_err());
}

#[test]
fn weights_scale_their_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = small_model(2);
    let s = random_scaling(&mut rng);
    let z = random_vec(&mut rng, 6, 1.0);
    let alpha: Vec<Vec<f64>> = (0..M - 1).map(|_| random_vec(&mut rng, N_POD, 1.0)).collect();
    let mu: Vec<Vec<f64>> = (0..M - 1).map(|_| random_vec(&mut rng, N_MU, 1.0)).collect();
    let only_alpha = PredLossConfig::default();
    let only_mu = PredLossConfig {
        w_alpha: vec![0.0; N_POD],
        zeta_mu: 1.0,
        ..PredLossConfig::default()
    };
    let both = PredLossConfig {
        w_alpha: vec![2.0; N_POD],
        zeta_mu: 0.5,
        ..PredLossConfig::default()
    };
    let la = prediction_loss(&g, &s, &z, &alpha, &mu, &only_alpha).unwrap();
    let lm = prediction_loss(&g, &s, &z, &alpha, &mu, &only_mu).unwrap();
    let lb = prediction_loss(&g, &s, &z, &alpha, &mu, &both).unwrap();
    assert!((lb - (2.0 * la + 0.5 * lm)).abs() < 1e-12 * lb.abs().max(1.0));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..5 {
        let g = small_model(trial);
        let s = random_scaling(&mut rng);
        let alpha: Vec<Vec<f64>> = (0..M - 1).map(|_| random_vec(&mut rng, N_POD, 2.0)).collect();
        let mu: Vec<Vec<f64>> = (0..M - 1).map(|_| random_vec(&mut rng, N_MU, 2.0)).collect();
        let cfg = PredLossConfig {
            w_alpha: random_vec(&mut rng, N_POD, 1.0).iter().map(|w| w.abs()).collect(),
            zeta_mu: 0.3,
            ..PredLossConfig::default()
        };
        let inputs = LossInputs::new(
            &alpha,
            &mu,
            &cfg.w_alpha(N_POD),
            &cfg.w_mu(N_MU),
            cfg.zeta_mu,
            &WindowObservations::default(),
        )
        .unwrap();
        let mut lg = LossGraph::new(&g, &s, N_POD, Direction::Forward);
        let z = random_vec(&mut rng, 6, 1.5);
        let (_, grad) = lg.loss_and_grad(&z, &inputs).unwrap();
        let err = relative_error(|x| lg.loss(x, &inputs).unwrap(), &z, &grad, 1e-6);
        assert!(err < 1e-4, "trial {trial}: relative gradient error {err:e}");
    }
}

#[test]
fn linear_oracle_recovers_planted_next_level() {
    let dynm = planted_dynamics(N_POD, N_MU, 3);
    let g = dynamics_generator(&dynm, M);
    let s0 = vec![0.8, -0.4, 0.3, 1.5, -0.7];
    let traj = trajectory(&dynm, &s0, M);
    let (alpha, mu) = split(&traj, N_POD);
    let cfg = exact_cfg();
    let mut lg = LossGraph::new(&g, &WindowScaling::identity(5), N_POD, Direction::Forward);
    let mut state = PredictionState::new(&alpha[..M - 1], mu.clone(), vec![0.0; 5]);
    let (next, _, report) = predict_next(&mut lg, &mut state, &cfg).unwrap();
    let err = next
        .iter()
        .zip(&alpha[M - 1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-6, "next level off by {err:e} after {} iterations", report.iterations);
    assert!(report.loss <= report.initial_loss);
}

#[test]
fn linear_oracle_rollout_reproduces_trajectory() {
    let dynm = planted_dynamics(N_POD, N_MU, 5);
    let g = dynamics_generator(&dynm, M);
    let s0 = vec![-0.5, 0.9, 0.2, 0.4, 1.1];
    let n = 14;
    let traj = trajectory(&dynm, &s0, n);
    let (alpha, mu) = split(&traj, N_POD);
    let r = rollout(&g, &WindowScaling::identity(5), N_POD, &alpha[..M - 1], &mu, n, &exact_cfg(), 7).unwrap();
    assert_eq!(r.alpha.len(), n);
    for (k, (a, b)) in r.alpha.iter().zip(&alpha).enumerate() {
        let err = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "level {k}: error {err:e}");
    }
}

#[test]
fn warm_start_uses_previous_latent() {
    let dynm = planted_dynamics(N_POD, N_MU, 8);
    let g = dynamics_generator(&dynm, M);
    let traj = trajectory(&dynm, &[0.3, 0.3, -0.2, 1.0, 0.5], M + 1);
    let (alpha, mu) = split(&traj, N_POD);
    let cfg = PredLossConfig {
        zeta_mu: 1.0,
        ..PredLossConfig::default()
    };
    let mut lg = LossGraph::new(&g, &WindowScaling::identity(5), N_POD, Direction::Forward);
    let mut state = PredictionState::new(&alpha[..M - 1], mu.clone(), vec![0.0; 5]);
    predict_next(&mut lg, &mut state, &cfg).unwrap();
    let carried = state.z.clone();

    // The second level's first evaluation must be at the carried latent.
    let known: Vec<Vec<f64>> = state.ring.iter().cloned().collect();
    let inputs = LossInputs::new(
        &known,
        &mu[1..M],
        &cfg.w_alpha(N_POD),
        &cfg.w_mu(N_MU),
        cfg.zeta_mu,
        &WindowObservations::default(),
    )
    .unwrap();
    let expected = lg.loss(&carried, &inputs).unwrap();
    let (_, _, report) = predict_next(&mut lg, &mut state, &cfg).unwrap();
    assert_eq!(report.initial_loss, expected);
    assert!(report.loss <= report.initial_loss);
}

#[test]
fn ring_keeps_m_minus_one_levels_and_history_is_frozen() {
    let g = small_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_scaling(&mut rng);
    let initial: Vec<Vec<f64>> = (0..M - 1).map(|_| random_vec(&mut rng, N_POD, 1.0)).collect();
    let mu = vec![vec![0.5, -0.5]; 10];
    let cfg = PredLossConfig {
        max_iter: 30,
        ..PredLossConfig::default()
    };
    let mut lg = LossGraph::new(&g, &s, N_POD, Direction::Forward);
    let mut state = PredictionState::new(&initial, mu, vec![0.0; 6]);
    let mut accepted: Vec<Vec<f64>> = initial.clone();
    for _ in 0..5 {
        let (a, _, _) = predict_next(&mut lg, &mut state, &cfg).unwrap();
        accepted.push(a);
        assert_eq!(state.ring.len(), M - 1);
        let tail: Vec<Vec<f64>> = state.ring.iter().cloned().collect();
        assert_eq!(tail, accepted[accepted.len() - (M - 1)..].to_vec());
    }
}

#[test]
fn accepted_levels_are_generator_rows() {
    let g = small_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = random_scaling(&mut rng);
    let initial: Vec<Vec<f64>> = (0..M - 1).map(|_| random_vec(&mut rng, N_POD, 1.0)).collect();
    let mu = vec![vec![0.1, 0.2]; 8];
    let cfg = PredLossConfig {
        max_iter: 40,
        ..PredLossConfig::default()
    };
    let r = rollout(&g, &s, N_POD, &initial, &mu, 8, &cfg, 1).unwrap();
    for l in M - 1..8 {
        let z = r.z[l].as_ref().unwrap();
        let w = g.generate(z);
        let row: Vec<f64> = w
            .row(M - 1)
            .iter()
            .enumerate()
            .map(|(c, v)| s.scale[c] * v + s.offset[c])
            .collect();
        assert_eq!(&row[..N_POD], r.alpha[l].as_slice());
        assert_eq!(&row[N_POD..], r.mu[l].as_slice());
    }
}

#[test]
fn rollout_of_initial_length_returns_input() {
    let g = small_model(5);
    let initial: Vec<Vec<f64>> = (0..M - 1).map(|k| vec![k as f64; N_POD]).collect();
    let mu = vec![vec![1.0, 2.0]; M - 1];
    let s = WindowScaling::identity(N_POD + N_MU);
    let r = rollout(&g, &s, N_POD, &initial, &mu, M - 1, &PredLossConfig::default(), 0).unwrap();
    assert_eq!(r.alpha, initial);
    assert!(r.reports.is_empty());
    assert!(rollout(&g, &s, N_POD, &initial[1..], &mu, M - 1, &PredLossConfig::default(), 0).is_err());
}

#[test]
fn rollout_is_deterministic() {
    let g = small_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_scaling(&mut rng);
    let initial: Vec<Vec<f64>> = (0..M - 1).map(|_| random_vec(&mut rng, N_POD, 1.0)).collect();
    let mu = vec![vec![0.3, 0.4]; 9];
    let cfg = PredLossConfig {
        max_iter: 25,
        ..PredLossConfig::default()
    };
    let a = rollout(&g, &s, N_POD, &initial, &mu, 9, &cfg, 42).unwrap();
    let b = rollout(&g, &s, N_POD, &initial, &mu, 9, &cfg, 42).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn best_iterate_never_worse_than_start(seed in 0u64..1000, iters in 1usize..60) {
        let g = small_model(seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_scaling(&mut rng);
        let alpha: Vec<Vec<f64>> = (0..M - 1).map(|_| random_vec(&mut rng, N_POD, 2.0)).collect();
        let mu: Vec<Vec<f64>> = (0..M - 1).map(|_| random_vec(&mut rng, N_MU, 2.0)).collect();
        let cfg = PredLossConfig { max_iter: iters, zeta_mu: 0.1, ..PredLossConfig::default() };
        let inputs = LossInputs::new(&alpha, &mu, &cfg.w_alpha(N_POD), &cfg.w_mu(N_MU), cfg.zeta_mu, &WindowObservations::default()).unwrap();
        let mut lg = LossGraph::new(&g, &s, N_POD, Direction::Forward);
        let z0 = random_vec(&mut rng, 6, 1.0);
        let fit = optimize_latent(&mut lg, &inputs, &z0, &cfg).unwrap();
        prop_assert!(fit.loss <= fit.initial_loss);
        prop_assert!(fit.iterations <= iters);
        prop_assert_eq!(lg.loss(&fit.z, &inputs).unwrap(), fit.loss);
    }
}
