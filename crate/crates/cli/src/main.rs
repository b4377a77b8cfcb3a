//! `dapredgan`: run the experiment pipeline step by step.
//!
//! Every command prints one JSON object on stdout when it succeeds. Failures
//! print `{"error": {"kind", "message"}}` on stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dapredgan::da::ObservationSet;
use dapredgan::epi::{Snapshots, T_DAY};
use dapredgan::gan::TrainOptions;
use dapredgan::pipeline::{self, ExperimentConfig, Manifest, ObservationConfig, PipelineError};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "dapredgan", version, about = "Epidemic surrogate modelling and data assimilation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for ensemble generation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory all artifacts are read from and written to.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Config file helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Run the high-fidelity ensemble into `<out-dir>/ensemble`.
    GenerateEnsemble,
    /// Build the basis and train the network into `<out-dir>/model`.
    Train {
        /// Ensemble directory [default: <out-dir>/ensemble].
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Write a checkpoint every this many epochs.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// One high-fidelity run, written to `<out-dir>/<name>.dpgc`.
    Simulate {
        #[arg(long, value_parser = parse_pair)]
        r0: [f64; 2],
        #[arg(long, default_value = "truth")]
        name: String,
    },
    /// Roll the surrogate out from the first levels of a high-fidelity run.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Run supplying the initial levels.
        #[arg(long, conflicts_with = "r0")]
        source: Option<PathBuf>,
        /// Simulate the source run with these reproduction numbers; it then
        /// also serves as the ground truth.
        #[arg(long, value_parser = parse_pair)]
        r0: Option<[f64; 2]>,
        /// Reproduction numbers fed to the surrogate [default: the source's].
        #[arg(long, value_parser = parse_pair)]
        mu: Option<[f64; 2]>,
        /// Ground truth for the error report.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Start the rollout this many days into the run.
        #[arg(long)]
        start_day: Option<f64>,
    },
    /// Synthesise noisy observations of a truth run.
    Observe {
        /// Truth run [default: simulate the configured truth].
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Observe infectious totals every two days.
        #[arg(long)]
        realistic: bool,
    },
    /// Assimilate observations into `<out-dir>/assimilation`.
    Assimilate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Observation CSV [default: <out-dir>/observations.csv].
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Run supplying the initial guess [default: simulate the configured guess].
        #[arg(long)]
        guess: Option<PathBuf>,
    },
    /// Write plot-ready tables for the artifacts in a directory.
    ExportPlots {
        /// Artifact directory [default: <out-dir>].
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the default config, or write it with `--write`.
    Init {
        #[arg(long)]
        write: Option<PathBuf>,
        /// Start from the infectious-only, every-two-days observation setup.
        #[arg(long)]
        realistic: bool,
    },
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.trim().parse().map_err(|e| format!("{a}: {e}"))?,
            b.trim().parse().map_err(|e| format!("{b}: {e}"))?,
        ]),
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn save(&self, snap: &Snapshots, name: &str) -> Result<PathBuf, PipelineError> {
        std::fs::create_dir_all(&self.out).map_err(|source| PipelineError::Io {
            path: self.out.clone(),
            source,
        })?;
        let path = self.out.join(name);
        snap.to_container()
            .with_meta("config_digest", self.cfg.digest())
            .save(&path)?;
        Ok(path)
    }

    fn load_snapshots(path: &Path) -> Result<Snapshots, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingArtifact(path.to_path_buf()));
        }
        Ok(Snapshots::load(path)?)
    }
}

fn run(cli: Cli) -> Result<Value, PipelineError> {
    let g = cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Invalid(e.to_string()))?;
    }
    let mut cfg = match &g.config {
        Some(p) if p.exists() => ExperimentConfig::load(p)?,
        Some(p) => return Err(PipelineError::MissingArtifact(p.clone())),
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let ctx = Ctx { cfg, out: g.out_dir };
    let cfg = &ctx.cfg;

    match cli.command {
        Command::Config {
            action: ConfigAction::Init { write, realistic },
        } => {
            let mut c = cfg.clone();
            if realistic {
                c.observations = ObservationConfig::realistic();
            }
            let text = c.to_toml();
            match write {
                Some(p) => {
                    std::fs::write(&p, &text).map_err(|source| PipelineError::Io {
                        path: p.clone(),
                        source,
                    })?;
                    Ok(json!({ "config": p, "digest": c.digest() }))
                }
                None => {
                    print!("{text}");
                    Ok(Value::Null)
                }
            }
        }
        Command::GenerateEnsemble => {
            let dir = ctx.out.join("ensemble");
            let m = pipeline::generate_ensemble(cfg, &dir)?;
            let failed = m.members.iter().filter(|r| r.error.is_some()).count();
            Ok(json!({
                "ensemble": dir,
                "members": m.members.len(),
                "failed": failed,
                "config_digest": m.config_digest,
            }))
        }
        Command::Train {
            ensemble,
            checkpoint_every,
        } => {
            let ens = ctx.path(&ensemble, "ensemble");
            let members = Manifest::load(&ens)?.load_members(&ens)?;
            let dir = ctx.out.join("model");
            let opts = TrainOptions {
                checkpoint_dir: (checkpoint_every > 0).then(|| dir.join("checkpoints")),
                checkpoint_every,
            };
            if let Some(d) = &opts.checkpoint_dir {
                std::fs::create_dir_all(d).map_err(|source| PipelineError::Io {
                    path: d.clone(),
                    source,
                })?;
            }
            let t = pipeline::train_surrogate(cfg, &members, &opts)?;
            pipeline::save_trained(cfg, &t, &dir)?;
            Ok(json!({
                "model": dir,
                "members": members.len(),
                "captured_variance": t.basis.captured_variance(t.basis.n_pod),
                "epochs": t.history.epochs.len(),
            }))
        }
        Command::Simulate { r0, name } => {
            let snap = pipeline::simulate(cfg, r0, Some(cfg.seed))?;
            let path = ctx.save(&snap, &format!("{name}.dpgc"))?;
            Ok(json!({ "run": path, "levels": snap.states.len(), "r0": r0 }))
        }
        Command::Predict {
            model,
            source,
            r0,
            mu,
            truth,
            start_day,
        } => {
            let mut cfg = cfg.clone();
            if let Some(d) = start_day {
                cfg.predict.start_level = (d * T_DAY / cfg.epi.dt).round() as usize;
            }
            let (basis, gan) = pipeline::load_trained(&ctx.path(&model, "model"))?;
            let (source, simulated) = match (source, r0) {
                (Some(p), _) => (Ctx::load_snapshots(&p)?, false),
                (None, Some(r)) => (pipeline::simulate(&cfg, r, Some(cfg.seed))?, true),
                (None, None) => {
                    return Err(PipelineError::Invalid(
                        "predict needs --source or --r0".into(),
                    ))
                }
            };
            let truth = match truth {
                Some(p) => Some(Ctx::load_snapshots(&p)?),
                None if simulated => Some(source.clone()),
                None => None,
            };
            let mu = mu.unwrap_or([source.header.params.r0_home, source.header.params.r0_mobile]);
            let p = pipeline::predict(&cfg, &basis, &gan, &source, mu, truth.as_ref())?;
            let snap = pipeline::trajectory_snapshots(&cfg, &p.levels, p.states.clone(), mu);
            let out = ctx.save(&snap, "prediction.dpgc")?;
            if let Some(t) = &truth {
                ctx.save(t, "truth.dpgc")?;
            }
            p.write_report_csv(&ctx.out.join("prediction_report.csv"))?;
            Ok(json!({
                "prediction": out,
                "levels": p.levels.n_levels,
                "mean_rel_l2": p.mean_rel_l2(),
            }))
        }
        Command::Observe { truth, realistic } => {
            let mut cfg = cfg.clone();
            if realistic {
                cfg.observations = ObservationConfig {
                    truth_r0: cfg.observations.truth_r0,
                    guess_r0: cfg.observations.guess_r0,
                    ..ObservationConfig::realistic()
                };
            }
            let truth = match truth {
                Some(p) => Ctx::load_snapshots(&p)?,
                None => {
                    let t = pipeline::simulate(&cfg, cfg.observations.truth_r0, Some(cfg.seed))?;
                    ctx.save(&t, "truth.dpgc")?;
                    t
                }
            };
            let obs = pipeline::observe(&cfg, &truth, cfg.seed)?;
            let path = ctx.out.join("observations.csv");
            std::fs::create_dir_all(&ctx.out).map_err(|source| PipelineError::Io {
                path: ctx.out.clone(),
                source,
            })?;
            obs.write_csv(&path).map_err(PipelineError::from)?;
            Ok(json!({ "observations": path, "count": obs.len() }))
        }
        Command::Assimilate {
            model,
            observations,
            guess,
        } => {
            let (basis, gan) = pipeline::load_trained(&ctx.path(&model, "model"))?;
            let obs_path = ctx.path(&observations, "observations.csv");
            if !obs_path.exists() {
                return Err(PipelineError::MissingArtifact(obs_path));
            }
            let obs = ObservationSet::read_csv(&obs_path)?;
            let guess = match guess {
                Some(p) => Ctx::load_snapshots(&p)?,
                None => pipeline::simulate(cfg, cfg.observations.guess_r0, Some(cfg.seed))?,
            };
            let (levels, a) = pipeline::run_assimilation(cfg, &basis, &gan, &obs, &guess)?;
            let dir = ctx.out.join("assimilation");
            pipeline::save_assimilation(cfg, &basis, &levels, &a, &dir)?;
            Ok(json!({
                "assimilation": dir,
                "converged": a.converged,
                "outer_iterations": a.iterations.len(),
                "initial_mismatch": a.initial_mismatch,
                "final_mismatch": a.final_mismatch,
            }))
        }
        Command::ExportPlots { dir } => {
            let dir = dir.unwrap_or_else(|| ctx.out.clone());
            let written = pipeline::export_plots(cfg, &dir, &ctx.out.join("plots"))?;
            Ok(json!({ "files": written }))
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
