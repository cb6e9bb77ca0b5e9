use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use geoplan::diagnostics;
use geoplan::envs::TreeWorld;
use geoplan::runtime::{self, Checkpoint, EncodedDataset, RunConfig, RunManifest, RuntimeError};
use geoplan::worldmodel::WorldModel;

#[derive(Parser)]
#[command(
    name = "geoplan",
    version,
    about = "Hyperbolic world-model training and CEM planning on synthetic trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; the built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the training trajectories as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised stage from a fresh initialisation.
    TrainSft {
        #[command(flatten)]
        common: Common,
        /// Dataset from `gen-data`; regenerated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// GRL stage starting from an SFT checkpoint.
    TrainGrl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// One receding-horizon episode between two tree nodes.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        start: usize,
        #[arg(long)]
        goal: usize,
        #[arg(long)]
        horizon: usize,
    },
    /// Held-out evaluation at every configured horizon.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Energy landscape CSV around a sampled transition.
    SweepEnergy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Gromov δ CSV of the model's latents.
    DeltaHyp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, RuntimeError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk_default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.out).map_err(|source| RuntimeError::Io {
        context: format!("creating {}", common.out.display()),
        source,
    })?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RuntimeError> {
    std::fs::write(path, bytes).map_err(|source| RuntimeError::Io {
        context: format!("writing {}", path.display()),
        source,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), RuntimeError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn load_data(
    cfg: &RunConfig,
    world: &TreeWorld,
    model: &WorldModel,
    data: Option<&Path>,
) -> Result<EncodedDataset, RuntimeError> {
    match data {
        None => runtime::generate_training_data(cfg, world, &model.encoder),
        Some(p) => {
            let f = File::open(p).map_err(|source| RuntimeError::Io {
                context: format!("reading {}", p.display()),
                source,
            })?;
            let records = runtime::read_dataset_jsonl(BufReader::new(f));
            EncodedDataset::from_records(world, records, &model.encoder, cfg.data.traj_len)
        }
    }
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<WorldModel, RuntimeError> {
    let model = Checkpoint::load(path)?.to_model()?;
    let (world, _) = runtime::build_world(cfg)?;
    if model.encoder.obs_dim != geoplan::envs::Environment::obs_dim(&world) {
        return Err(RuntimeError::Config(format!(
            "checkpoint expects observations of size {}, the configured world has {}",
            model.encoder.obs_dim,
            geoplan::envs::Environment::obs_dim(&world)
        )));
    }
    Ok(model)
}

fn train(
    stage: &str,
    common: &Common,
    cfg: &RunConfig,
    start: Option<&Path>,
    data: Option<&Path>,
) -> Result<(), RuntimeError> {
    let clock = Instant::now();
    let (world, encoder) = runtime::build_world(cfg)?;
    let model = match start {
        Some(p) => load_model(cfg, p)?,
        None => runtime::init_model(cfg, &encoder)?,
    };
    let data = load_data(cfg, &world, &model, data)?;
    let outcome = if stage == "sft" {
        runtime::train_sft(cfg, &data, model)?
    } else {
        runtime::train_grl(cfg, &data, model)?
    };
    let ck = Checkpoint::from_model(&outcome.model, Some(outcome.rng_state.clone()));
    ck.save(&common.out.join(format!("{stage}_checkpoint.json")))?;
    let manifest = RunManifest::new(stage, cfg, &outcome, &ck, clock.elapsed().as_secs_f64());
    write_json(
        &common.out.join(format!("{stage}_manifest.json")),
        &manifest,
    )?;
    eprintln!(
        "{stage}: loss {:.6} -> {:.6}, c = {:.4}, checkpoint {}",
        outcome.initial_loss,
        outcome.final_loss,
        outcome.model.predictor.curvature.c(),
        manifest.checkpoint_hash
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), RuntimeError> {
    match cli.command {
        Command::PrintConfig { config, seed } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::desk_default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let world = TreeWorld::new(cfg.world.clone())?;
            let stream = runtime::training_stream(&cfg, &world)?;
            let holdout = cfg.holdout();
            let path = common.out.join("dataset.jsonl");
            let f = File::create(&path).map_err(|source| RuntimeError::Io {
                context: format!("writing {}", path.display()),
                source,
            })?;
            let mut w = BufWriter::new(f);
            let records =
                runtime::filtered_records(&stream, &world, Some(&holdout), cfg.data.num_traj);
            let n = runtime::write_dataset_jsonl(records, &mut w)?;
            w.flush().map_err(|source| RuntimeError::Io {
                context: format!("writing {}", path.display()),
                source,
            })?;
            eprintln!("wrote {n} trajectories to {}", path.display());
        }
        Command::TrainSft { common, data } => {
            let cfg = load_config(&common)?;
            train("sft", &common, &cfg, None, data.as_deref())?;
        }
        Command::TrainGrl {
            common,
            checkpoint,
            data,
        } => {
            let cfg = load_config(&common)?;
            train("grl", &common, &cfg, Some(&checkpoint), data.as_deref())?;
        }
        Command::Plan {
            common,
            checkpoint,
            start,
            goal,
            horizon,
        } => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg, &checkpoint)?;
            let world = TreeWorld::new(cfg.world.clone())?;
            let seed = cfg.seed_for("plan");
            let report = runtime::plan_pair(&cfg, &world, &model, start, goal, horizon, seed, 0)?;
            write_json(&common.out.join("plan.json"), &report)?;
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg, &checkpoint)?;
            let world = TreeWorld::new(cfg.world.clone())?;
            let segments = runtime::training_segments(&cfg, &world)?;
            let reports = cfg
                .eval
                .horizons
                .iter()
                .map(|&h| runtime::run_eval(&cfg, &world, &model, h, &segments))
                .collect::<Result<Vec<_>, _>>()?;
            for r in &reports {
                eprintln!(
                    "T={}: SR {:.3} mAcc {:.3} mIoU {:.3} ({} pairs)",
                    r.horizon, r.sr, r.macc, r.miou, r.num_pairs
                );
            }
            write_json(&common.out.join("eval_report.json"), &reports)?;
        }
        Command::SweepEnergy { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg, &checkpoint)?;
            let world = TreeWorld::new(cfg.world.clone())?;
            let grid = runtime::run_sweep(&cfg, &world, &model)?;
            write_file(&common.out.join("landscape.csv"), grid.to_csv().as_bytes())?;
        }
        Command::DeltaHyp { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg, &checkpoint)?;
            let world = TreeWorld::new(cfg.world.clone())?;
            let report = runtime::run_delta(&cfg, &world, &model)?;
            write_file(
                &common.out.join("delta.csv"),
                diagnostics::delta_csv(&report).as_bytes(),
            )?;
            eprintln!("normalized mean delta {:.6}", report.normalized_mean);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("GEOPLAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // ignore the error if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
