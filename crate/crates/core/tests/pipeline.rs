use std::fs;
use std::path::Path;

use dapredgan::container::Container;
use dapredgan::epi::{Snapshots, T_DAY};
use dapredgan::gan::{GanConfig, TrainOptions, WindowGenerator};
use dapredgan::pipeline::{
    export_plots, generate_ensemble, load_trained, observation_cells, observation_levels,
    observe, predict, run_assimilation, sample_r0_pairs, save_assimilation, save_trained,
    simulate, train_surrogate, ExperimentConfig, Manifest, ObservationConfig,
};
use dapredgan::tensor::AdamConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Three simulated days, four members and a small network.
fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 5;
    cfg.epi.days = 3.0;
    cfg.ensemble.members = 4;
    cfg.windows.n_pod = 6;
    cfg.windows.m = 4;
    cfg.gan = GanConfig {
        latent_dim: 8,
        window_rows: 4,
        window_cols: 8,
        generator_hidden: vec![32, 32],
        discriminator_hidden: vec![32, 16],
        epochs: 200,
        batch_size: 32,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::gan()
        },
        seed: 5,
        ..GanConfig::default()
    };
    cfg.predict.loss.max_iter = 40;
    cfg.predict.loss.restarts = 1;
    cfg.assimilation.pred.max_iter = 20;
    cfg.assimilation.pred.restarts = 1;
    cfg.assimilation.max_outer = 3;
    cfg
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn default_config_values() {
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.ensemble.members, 40);
    assert_eq!(cfg.epi.dt, 4000.0);
    assert_eq!(cfg.epi.days, 45.5);
    assert_eq!((cfg.windows.n_pod, cfg.windows.m, cfg.windows.stride), (15, 10, 2));
    assert_eq!((cfg.epi.r0_min, cfg.epi.r0_max), (0.0, 20.0));
    assert_eq!(cfg.gan.epochs, 5000);
    assert_eq!(cfg.assimilation.zeta_hat_obs, 10.0);
    assert_eq!(cfg.observations.truth_r0, [7.7, 17.4]);
    assert_eq!(cfg.observations.guess_r0, [6.5, 5.7]);
    assert_eq!(cfg.observations.noise, 0.05);
    cfg.validate().unwrap();
}

#[test]
fn config_toml_round_trip_and_validation() {
    let cfg = small_config();
    let text = cfg.to_toml();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest(), cfg.digest());
    assert_ne!(ExperimentConfig::default().digest(), cfg.digest());
    // Missing keys take their defaults.
    assert_eq!(ExperimentConfig::from_toml("seed = 3").unwrap().seed, 3);
    let mut bad = cfg.clone();
    bad.windows.m = 5;
    assert!(bad.validate().is_err());
    assert!(ExperimentConfig::from_toml("seed = \"x\"").is_err());
}

#[test]
fn default_r0_samples_lie_in_range() {
    let pairs = sample_r0_pairs(&ExperimentConfig::default());
    assert_eq!(pairs.len(), 40);
    assert!(pairs.iter().flatten().all(|r| *r > 0.0 && *r < 20.0));
}

#[test]
fn ensemble_of_one_and_determinism() {
    let mut cfg = small_config();
    cfg.ensemble.members = 1;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_ensemble(&cfg, a.path()).unwrap();
    let mb = generate_ensemble(&cfg, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.members.len(), 1);
    assert_eq!(ma.members[0].r0, sample_r0_pairs(&cfg)[0]);
    let files: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".dpgc"))
        .collect();
    assert_eq!(files, vec!["member_000.dpgc".to_string()]);
    let f = ma.members[0].file.as_ref().unwrap();
    assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    assert_eq!(Manifest::load(a.path()).unwrap(), ma);
    let members = ma.load_members(a.path()).unwrap();
    assert_eq!(members[0].states.len(), cfg.epi.n_steps() + 1);
}

#[test]
fn missing_manifest_is_a_named_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Manifest::load(dir.path()).unwrap_err();
    assert_eq!(err.kind(), "missing_artifact");
    assert!(err.to_string().contains("manifest.json"));
}

#[test]
fn train_predict_assimilate_export() {
    let cfg = small_config();
    let work = tempfile::tempdir().unwrap();
    let dir = work.path();
    let manifest = generate_ensemble(&cfg, &dir.join("ensemble")).unwrap();
    let members = manifest.load_members(&dir.join("ensemble")).unwrap();
    assert_eq!(members.len(), 4);

    // Training writes basis, checkpoint, history and variance curve.
    let trained = train_surrogate(&cfg, &members, &TrainOptions::default()).unwrap();
    assert_eq!(trained.history.epochs.len(), 200);
    save_trained(&cfg, &trained, dir).unwrap();
    for f in ["basis.dpgc", "gan.dpgc", "history.csv", "variance.csv"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let mut energy = 0.0;
    let mut r = csv::Reader::from_path(dir.join("variance.csv")).unwrap();
    for rec in r.records() {
        energy += rec.unwrap()[2].parse::<f64>().unwrap();
    }
    assert!((energy - 1.0).abs() < 1e-10);
    let (basis, model) = load_trained(dir).unwrap();
    assert_eq!(model, trained.model);
    assert_eq!(basis, trained.basis);
    let gan = Container::load(&dir.join("gan.dpgc")).unwrap();
    assert_eq!(gan.meta("experiment_digest").unwrap(), cfg.digest());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..4 {
        let z = dapredgan::predgan::random_latent(&mut rng, model.latent_dim());
        assert_eq!(model.generate(&z), trained.model.generate(&z));
    }

    // Prediction: a rollout of only the initial levels returns them.
    let truth = &members[0];
    let r0 = manifest.members[0].r0;
    let mut short = cfg.clone();
    short.predict.n_levels = cfg.windows.m - 1;
    let p = predict(&short, &basis, &model, truth, r0, Some(truth)).unwrap();
    for (l, a) in p.rollout.alpha.iter().enumerate() {
        assert_eq!(a, &basis.project(&truth.states[p.levels.stored(l)]).unwrap());
    }
    assert!(p.rollout.reports.is_empty());

    let mut horizon = cfg.clone();
    horizon.predict.n_levels = 12;
    let p = predict(&horizon, &basis, &model, truth, r0, Some(truth)).unwrap();
    let again = predict(&horizon, &basis, &model, truth, r0, Some(truth)).unwrap();
    assert_eq!(p.rollout, again.rollout);
    assert_eq!(p.states.len(), 12);
    p.write_report_csv(&dir.join("report.csv")).unwrap();
    let report = read(&dir.join("report.csv"));
    assert!(report.lines().next().unwrap().ends_with(",rel_l2"));
    assert_eq!(report.lines().count(), 13);
    let blind = predict(&horizon, &basis, &model, truth, r0, None).unwrap();
    blind.write_report_csv(&dir.join("blind.csv")).unwrap();
    assert!(!read(&dir.join("blind.csv")).contains("rel_l2"));

    // Assimilation of twin observations from the first member.
    let obs = observe(&cfg, truth, 9).unwrap();
    let cells = observation_cells(&cfg).unwrap().len();
    let n_levels = cfg.level_map(truth.states.len()).unwrap().n_levels;
    assert_eq!(obs.len(), cells * 8 * n_levels);
    let guess = simulate(&cfg, cfg.observations.guess_r0, Some(cfg.seed)).unwrap();
    let (levels, a) = run_assimilation(&cfg, &basis, &model, &obs, &guess).unwrap();
    save_assimilation(&cfg, &basis, &levels, &a, &dir.join("assimilation")).unwrap();
    for f in ["trajectory.dpgc", "mu_history.csv", "diagnostics.csv", "summary.json"] {
        assert!(dir.join("assimilation").join(f).exists(), "{f} missing");
    }
    let mu_csv = read(&dir.join("assimilation/mu_history.csv"));
    assert!(mu_csv.starts_with("level,r0_home,r0_mobile"));
    assert_eq!(mu_csv.lines().count(), n_levels + 1);
    check_relaxation_column(&dir.join("assimilation/diagnostics.csv"), a.iterations.len());

    // Plot tables.
    fs::copy(dir.join("ensemble").join(manifest.members[0].file.as_ref().unwrap()), dir.join("truth.dpgc")).unwrap();
    let out = dir.join("plots");
    let written = export_plots(&cfg, dir, &out).unwrap();
    assert!(written.iter().any(|p| p.ends_with("pod_spectrum.csv")));
    let cell = observation_cells(&cfg).unwrap()[0];
    let truth_table = out.join(format!("truth_cell_{}_{}.csv", cell.0, cell.1));
    let mut series: Vec<String> = Vec::new();
    let mut days: Vec<f64> = Vec::new();
    let mut r = csv::Reader::from_path(&truth_table).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        if !series.contains(&rec[0].to_string()) {
            series.push(rec[0].to_string());
        }
        if series.len() == 1 {
            days.push(rec[1].parse().unwrap());
        }
    }
    assert_eq!(series.len(), 8);
    for (step, d) in days.iter().enumerate() {
        assert!((d - step as f64 * cfg.epi.dt / T_DAY).abs() < 1e-12);
    }
    let mut per_series = std::collections::HashMap::<String, usize>::new();
    let mut r = csv::Reader::from_path(out.join("assimilation_iterations.csv")).unwrap();
    for rec in r.records() {
        *per_series.entry(rec.unwrap()[0].to_string()).or_default() += 1;
    }
    assert!(per_series.contains_key("mismatch") && per_series.contains_key("r"));
    assert!(per_series.values().all(|&n| n == a.iterations.len()));
}

/// The `r` column obeys halve-on-rejection, grow-by-1.5-on-acceptance.
fn check_relaxation_column(path: &Path, iterations: usize) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (ci, cr, cm, cf, ca, cn) = (
        col("iteration"),
        col("r"),
        col("mismatch"),
        col("reference"),
        col("accepted"),
        col("r_next"),
    );
    let rows: Vec<_> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), iterations);
    let mut best: Option<f64> = None;
    for (k, row) in rows.iter().enumerate() {
        let num = |c: usize| row[c].parse::<f64>().unwrap();
        assert_eq!(row[ci].parse::<usize>().unwrap(), k + 1);
        let (rv, m, reference, next) = (num(cr), num(cm), num(cf), num(cn));
        let accepted: bool = row[ca].parse().unwrap();
        if k == 0 {
            assert_eq!(rv, 1.0);
        } else {
            assert_eq!(rv, rows[k - 1][cn].parse::<f64>().unwrap());
        }
        if let Some(b) = best {
            assert_eq!(reference, b);
        }
        assert_eq!(accepted, m <= reference);
        if accepted {
            assert_eq!(next, (1.5 * rv).min(1.0));
            best = Some(m);
        } else {
            assert_eq!(next, 0.5 * rv);
        }
    }
}

#[test]
fn realistic_observations_every_two_days() {
    let mut cfg = small_config();
    cfg.epi.days = 6.0;
    cfg.observations = ObservationConfig::realistic();
    let truth = simulate(&cfg, cfg.observations.truth_r0, None).unwrap();
    let levels = observation_levels(&cfg, truth.states.len()).unwrap();
    let days: Vec<f64> = levels.iter().map(|&l| l as f64 * cfg.epi.dt / T_DAY).collect();
    assert_eq!(levels.len(), 4);
    for (k, d) in days.iter().enumerate() {
        // Nearest lattice level: within one marching step of the target day.
        assert!((d - 2.0 * k as f64).abs() <= cfg.epi.dt * 2.0 / T_DAY);
    }
    let obs = observe(&cfg, &truth, 1).unwrap();
    assert_eq!(obs.len(), 4 * 5);
    assert!(obs.entries.iter().all(|e| e.compartment == dapredgan::epi::Compartment::I));
}

#[test]
fn observation_cells_are_region_corners() {
    let cfg = ExperimentConfig::default();
    let cells = observation_cells(&cfg).unwrap();
    assert_eq!(cells.len(), 5);
    let grid = cfg.grid.grid();
    for (&(x, y), &region) in cells.iter().zip(&cfg.observations.regions) {
        let idx = y * grid.nx + x;
        assert_eq!(grid.region_map[idx], region);
        // No cell of the region lies further left or below.
        for (j, &r) in grid.region_map.iter().enumerate() {
            if r == region {
                assert!(j % grid.nx >= x && j / grid.nx >= y);
            }
        }
    }
}

#[test]
fn noise_free_observations_match_truth() {
    let mut cfg = small_config();
    cfg.observations.noise = 0.0;
    let truth: Snapshots = simulate(&cfg, [5.0, 5.0], None).unwrap();
    let obs = observe(&cfg, &truth, 0).unwrap();
    let n_cells = truth.n_cells();
    for e in &obs.entries {
        let cell = e.cell_y * truth.header.nx + e.cell_x;
        let want: f64 = e
            .group
            .groups()
            .iter()
            .map(|&g| truth.states[e.time_level][dapredgan::epi::slot_index(n_cells, g, e.compartment, cell)])
            .sum();
        assert_eq!(e.value, want);
    }
}
