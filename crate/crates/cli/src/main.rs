use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vilod_core::dataset_io::{load_dataset_manifest, validate_splits};
use vilod_core::detector::{DetectorServer, RemoteDetector, SkillParams, SyntheticDetector};
use vilod_core::projection::{select_seed_pool, tsne_project, write_projection_csv, TsneConfig};
use vilod_core::synth::{generate_world, WorldConfig};
use vilod_core::workflow::{run_scripted_strategy, QualityFilter, SelectionPolicy, Trajectory};
use vilod_core::{DatasetRegistry, Detector, Embeddings, SessionConfig, Split};
use vilod_server::{DataLayout, ServerConfig};

mod export;

#[derive(Parser)]
#[command(
    name = "vilod",
    version,
    about = "Active-learning labeling loop for object detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scripted labeling strategy end to end and write its trajectory.
    Simulate(SimulateArgs),
    /// Project the training pool to 2D with t-SNE.
    Project(ProjectArgs),
    /// Pick the diversity seed pool.
    SeedPool(SeedPoolArgs),
    /// Serve the HTTP/WebSocket API (configured through VILOD_* variables).
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Serve the synthetic detector over the line protocol.
    DetectorServe {
        #[arg(long, default_value = "127.0.0.1:7070")]
        bind: SocketAddr,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset, embeddings and default config to a data root.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        world: WorldArgs,
    },
    /// Check a data root: split disjointness, labels, embedding coverage.
    Validate {
        #[arg(long, env = "VILOD_DATA_ROOT")]
        data_root: PathBuf,
    },
}

#[derive(Args, Clone)]
struct WorldArgs {
    #[arg(long, default_value_t = 1052)]
    pool: usize,
    #[arg(long, default_value_t = 225)]
    val: usize,
    #[arg(long, default_value_t = 227)]
    test: usize,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    world_seed: u64,
}

impl WorldArgs {
    fn config(&self) -> WorldConfig {
        WorldConfig {
            dim: self.dim,
            ..WorldConfig::sized(self.pool, self.val, self.test, self.world_seed)
        }
    }
}

/// A data root on disk, or a generated synthetic world when none is given.
#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[command(flatten)]
    world: WorldArgs,
}

impl DataArgs {
    fn load(&self) -> Result<(DatasetRegistry, Embeddings)> {
        match &self.data_root {
            Some(root) => {
                let layout = DataLayout::new(root);
                let registry = load_dataset_manifest(&layout.dataset())?;
                let embeddings = Embeddings::read(&layout.embeddings(), &layout.embedding_ids())?;
                Ok((registry, embeddings))
            }
            None => {
                let w = generate_world(&self.world.config());
                Ok((w.registry, w.embeddings))
            }
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Baseline,
    Exploration,
    Uncertainty,
    Balanced,
    Replay,
}

#[derive(Clone, Copy, ValueEnum)]
enum Filter {
    /// Accept every candidate.
    PassAll,
    /// Skip images on which the model found nothing.
    RequireDetections,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    strategy: Strategy,
    /// Session config (flat TOML); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Ids to replay, separated by newlines or commas.
    #[arg(long)]
    replay_file: Option<PathBuf>,
    /// Quality predicate for the uncertainty strategy.
    #[arg(long, value_enum, default_value = "pass-all")]
    filter: Filter,
    #[arg(long, default_value_t = SelectionPolicy::DEFAULT_CLASS_WEIGHT)]
    class_weight: f64,
    /// Remote detector; the synthetic backend when absent.
    #[arg(long, env = "VILOD_DETECTOR_ADDR")]
    detector_addr: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct SeedPoolArgs {
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    per_centroid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write ids here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

fn read_replay_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .split(['\n', ','])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect())
}

fn policy(args: &SimulateArgs) -> Result<SelectionPolicy> {
    Ok(match args.strategy {
        Strategy::Baseline => SelectionPolicy::UncertaintyBaseline,
        Strategy::Exploration => SelectionPolicy::Exploration,
        Strategy::Uncertainty => {
            let filter: QualityFilter = match args.filter {
                Filter::PassAll => Arc::new(|_, _| true),
                Filter::RequireDetections => Arc::new(|_, dets| !dets.is_empty()),
            };
            SelectionPolicy::UncertaintyFiltered(filter)
        }
        Strategy::Balanced => SelectionPolicy::Balanced {
            class_weight: args.class_weight,
        },
        Strategy::Replay => {
            let Some(path) = &args.replay_file else {
                bail!("--strategy replay needs --replay-file");
            };
            SelectionPolicy::Replay(read_replay_list(path)?)
        }
    })
}

fn detector(addr: Option<&str>, registry: &DatasetRegistry, seed: u64) -> Result<Box<dyn Detector>> {
    Ok(match addr {
        Some(a) => {
            let scratch = std::env::temp_dir().join(format!("vilod-manifests-{}", std::process::id()));
            fs::create_dir_all(&scratch)?;
            Box::new(RemoteDetector::new(a, scratch)?)
        }
        None => Box::new(SyntheticDetector::from_registry(registry, SkillParams::default(), seed)),
    })
}

fn print_trajectory(t: &Trajectory) {
    println!(
        "{:<12} {:>9} {:>8} {:>8} {:>8}",
        "iteration", "labeled", "mAP50", "mAP50-95", "recall"
    );
    for (row, n) in t.rows.iter().zip(&t.labeled_counts) {
        println!(
            "{:<12} {:>9} {:>8.4} {:>8.4} {:>8.4}",
            row.iteration, n, row.map50, row.map50_95, row.recall
        );
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    };
    let policy = policy(&args)?;
    let (registry, embeddings) = args.data.load()?;
    let det = detector(args.detector_addr.as_deref(), &registry, config.seed)?;
    let t = run_scripted_strategy(policy, &config, &registry, &embeddings, &*det)?;
    fs::write(&args.out, t.to_csv()).with_context(|| format!("writing {}", args.out.display()))?;
    print_trajectory(&t);
    if let Some(reason) = &t.aborted {
        log::warn!("run stopped early: {reason}");
    }
    Ok(())
}

fn project(args: ProjectArgs) -> Result<()> {
    let (registry, embeddings) = args.data.load()?;
    let pool = embeddings.subset(&registry.ids(Split::TrainPool))?;
    let cfg = TsneConfig {
        perplexity: args.perplexity,
        iterations: args.iterations,
        seed: args.seed,
        ..TsneConfig::default()
    };
    let p = tsne_project(&pool, &cfg)?;
    write_projection_csv(&args.out, &p.points)?;
    println!(
        "{} points, final KL {:.4}",
        p.points.len(),
        p.kl_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn seed_pool(args: SeedPoolArgs) -> Result<()> {
    let (registry, embeddings) = args.data.load()?;
    let pool = embeddings.subset(&registry.ids(Split::TrainPool))?;
    let ids = select_seed_pool(&pool, args.k, args.per_centroid, args.seed)?;
    let text = ids.join("\n") + "\n";
    match &args.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn validate(root: &Path) -> Result<()> {
    let layout = DataLayout::new(root);
    let registry = load_dataset_manifest(&layout.dataset())?;
    let mut problems: Vec<String> = validate_splits(&registry)
        .iter()
        .map(|v| serde_json::to_string(v).expect("violations serialize"))
        .collect();
    match Embeddings::read(&layout.embeddings(), &layout.embedding_ids()) {
        Ok(e) => {
            let missing = registry
                .ids(Split::TrainPool)
                .into_iter()
                .filter(|id| e.get(id).is_none());
            problems.extend(missing.map(|id| format!("no embedding for pool image {id}")));
        }
        Err(err) => problems.push(format!("embeddings: {err}")),
    }
    if layout.session_config().is_file() {
        if let Err(err) = SessionConfig::load(&layout.session_config()) {
            problems.push(format!("session.toml: {err}"));
        }
    }
    let (p, v, t) = registry.counts();
    println!(
        "{p} pool / {v} val / {t} test images, {} classes",
        registry.classes.len()
    );
    for line in &problems {
        println!("{line}");
    }
    if !problems.is_empty() {
        bail!("{} problem(s) found", problems.len());
    }
    println!("ok");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Simulate(a) => simulate(a),
        Command::Project(a) => project(a),
        Command::SeedPool(a) => seed_pool(a),
        Command::Serve { bind } => {
            let config = ServerConfig::from_env(bind)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(vilod_server::serve(config))?;
            Ok(())
        }
        Command::DetectorServe { bind, data, seed } => {
            let (registry, _) = data.load()?;
            let det: Arc<dyn Detector> = Arc::new(SyntheticDetector::from_registry(
                &registry,
                SkillParams::default(),
                seed,
            ));
            let server = DetectorServer::spawn(bind, det)?;
            log::info!("detector listening on {}", server.addr());
            server.join();
            Ok(())
        }
        Command::Synth { out, world } => {
            let w = generate_world(&world.config());
            export::write_world(&w, &out, world.world_seed)?;
            let (p, v, t) = w.registry.counts();
            println!("wrote {p} pool / {v} val / {t} test images to {}", out.display());
            Ok(())
        }
        Command::Validate { data_root } => validate(&data_root),
    }
}
