mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use dismesh_core::checkpoint::Checkpoint;
use dismesh_core::dataset::{sample_dataset, Dataset};
use dismesh_core::eval::{evaluate, EVAL_REPORT_FILE};
use dismesh_core::obj::{load_obj, write_obj};
use dismesh_core::trainer::{train, METRICS_FILE};
use dismesh_core::{tasks, TriangleMesh};

use config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const LOG_ENV: &str = "DISMESH_LOG";

#[derive(Parser)]
#[command(name = "dismesh", version, about = "Disentangled shape/pose mesh autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run config; flags override its values [default: none]
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic articulated-shape dataset
    GenerateData {
        /// Number of subjects (body shapes)
        #[arg(long, default_value_t = 20)]
        subjects: usize,
        /// Poses per subject
        #[arg(long, default_value_t = 30)]
        poses: usize,
        /// Generator seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (required)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train a model; writes checkpoints and metrics.jsonl to the run directory
    Train {
        /// Dataset directory (required)
        #[arg(long)]
        data: PathBuf,
        /// Run directory (required)
        #[arg(long)]
        out: PathBuf,
        /// Training epochs
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        /// Anchors per batch
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Adam learning rate
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Seed for initialization, shuffling, partners and noise
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Evaluate a checkpoint on a dataset and write an eval report
    Eval {
        /// Checkpoint directory, a run directory or its best/ subdirectory (required)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (required)
        #[arg(long)]
        data: PathBuf,
        /// Report path
        #[arg(long, default_value = "<checkpoint>/eval_report.json")]
        out: String,
        /// Seed for evaluation pairs, sequences and prior samples
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Prior samples drawn for diversity and specificity
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Decode the shape of one mesh in the pose of another
    Transfer {
        /// Checkpoint directory (required)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mesh providing the shape (required)
        #[arg(long, value_name = "OBJ")]
        shape_from: PathBuf,
        /// Mesh providing the pose (required)
        #[arg(long, value_name = "OBJ")]
        pose_from: PathBuf,
        /// Output mesh (required)
        #[arg(long, value_name = "OBJ")]
        out: PathBuf,
    },
    /// Align two mesh sequences by their pose codes
    Sync {
        /// Checkpoint directory (required)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of OBJ frames, ordered by file name (required)
        #[arg(long, value_name = "DIR")]
        seq_a: PathBuf,
        /// Directory of OBJ frames, ordered by file name (required)
        #[arg(long, value_name = "DIR")]
        seq_b: PathBuf,
        /// Alignment JSON (required)
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank gallery meshes by shape similarity to a query
    Match {
        /// Checkpoint directory (required)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Query mesh (required)
        #[arg(long, value_name = "OBJ")]
        query: PathBuf,
        /// Directory of OBJ gallery meshes (required)
        #[arg(long, value_name = "DIR")]
        gallery: PathBuf,
        /// Ranking JSON (required)
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode random draws from the prior
    Sample {
        /// Checkpoint directory (required)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of samples
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Prior sampling seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for sample_NNN.obj (required)
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP inference API
    Serve {
        /// Checkpoint directory (required)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bind address
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Port
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Allowed CORS origin; repeat for several
        #[arg(long = "cors-origin", default_value = "*")]
        cors_origins: Vec<String>,
        #[command(flatten)]
        config: ConfigArg,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Flag value when given on the command line, otherwise the config value.
fn pick<T>(m: &ArgMatches, id: &str, flag: T, from_config: T) -> T {
    if m.value_source(id) == Some(ValueSource::CommandLine) {
        flag
    } else {
        from_config
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(Failure::Usage),
    }
}

fn init_logging() -> Result<(), Failure> {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "info".into());
    if !["error", "info", "debug"].contains(&level.as_str()) {
        return Err(Failure::Usage(format!("{LOG_ENV} must be one of error, info, debug (got {level:?})")));
    }
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

fn load_checkpoint(dir: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn load_mesh(path: &Path) -> anyhow::Result<TriangleMesh> {
    load_obj(path).with_context(|| format!("reading {}", path.display()))
}

fn obj_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("{} contains no .obj files", dir.display());
    }
    Ok(files)
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command, m: &ArgMatches) -> Result<(), Failure> {
    match command {
        Command::GenerateData {
            subjects,
            poses,
            seed,
            out,
            config,
        } => {
            let cfg = load_config(&config.config)?;
            let subjects = pick(m, "subjects", subjects, cfg.data.subjects);
            let poses = pick(m, "poses", poses, cfg.data.poses);
            let seed = pick(m, "seed", seed, cfg.seed);
            let manifest = sample_dataset(subjects, poses, seed, &out).context("generating dataset")?;
            println!(
                "generated {} meshes ({subjects} subjects x {poses} poses, seed {seed}) -> {}",
                manifest.samples.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            epochs,
            batch_size,
            lr,
            seed,
            config,
        } => {
            let cfg = load_config(&config.config)?;
            let mut tc = cfg.train.clone();
            tc.epochs = pick(m, "epochs", epochs, tc.epochs);
            tc.batch_size = pick(m, "batch_size", batch_size, tc.batch_size);
            tc.optimizer.lr = pick(m, "lr", lr, tc.optimizer.lr);
            let seed = pick(m, "seed", seed, cfg.seed);
            tc.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            cfg.model.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let dataset = Dataset::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let outcome = train(&dataset, &cfg.model, &tc, &out, seed).context("training")?;
            let last = outcome.records.last().expect("at least one epoch");
            println!(
                "trained {} epochs: final val_recon_rmse {:.6}, best {:.6} at epoch {} (baseline {:.6}) -> {}",
                outcome.records.len(),
                last.val_recon_rmse,
                outcome.best_val_rmse,
                outcome.best_epoch,
                outcome.baseline_rmse,
                out.join(METRICS_FILE).display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            seed,
            samples,
            config,
        } => {
            let cfg = load_config(&config.config)?;
            let mut opts = cfg.eval;
            opts.seed = pick(m, "seed", seed, opts.seed);
            opts.n_samples = pick(m, "samples", samples, opts.n_samples);
            let out = if m.value_source("out") == Some(ValueSource::CommandLine) {
                PathBuf::from(out)
            } else {
                checkpoint.join(EVAL_REPORT_FILE)
            };
            let ck = load_checkpoint(&checkpoint)?;
            let dataset = Dataset::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let report = evaluate(&ck.model, &dataset, &opts).context("evaluating")?;
            report.write(&out).context("writing report")?;
            let fmt = |v: Option<f64>| v.map_or("null".to_string(), |x| format!("{x:.6}"));
            println!(
                "val_recon_rmse {} recon_rmse {} ({} null metrics) -> {}",
                fmt(report.val_recon_rmse),
                fmt(report.recon_rmse),
                report.null_reasons.len(),
                out.display()
            );
        }
        Command::Transfer {
            checkpoint,
            shape_from,
            pose_from,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let a = load_mesh(&shape_from)?;
            let b = load_mesh(&pose_from)?;
            let mesh = tasks::transfer(&ck.model, &a, &b).context("transfer")?;
            write_obj(&out, &mesh).with_context(|| format!("writing {}", out.display()))?;
            println!("transferred shape of {} onto pose of {} -> {}", shape_from.display(), pose_from.display(), out.display());
        }
        Command::Sync {
            checkpoint,
            seq_a,
            seq_b,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let load_seq = |dir: &Path| -> anyhow::Result<(Vec<PathBuf>, Vec<TriangleMesh>)> {
                let files = obj_files(dir)?;
                let meshes = files.iter().map(|f| load_mesh(f)).collect::<anyhow::Result<_>>()?;
                Ok((files, meshes))
            };
            let (_, a) = load_seq(&seq_a)?;
            let (_, b) = load_seq(&seq_b)?;
            let ra: Vec<&TriangleMesh> = a.iter().collect();
            let rb: Vec<&TriangleMesh> = b.iter().collect();
            let path = tasks::synchronize(&ck.model, &ra, &rb).context("synchronizing")?;
            write_json(&out, &serde_json::to_value(&path).expect("path serializes"))?;
            println!(
                "aligned {} x {} frames in {} steps, cost {:.6} -> {}",
                a.len(),
                b.len(),
                path.pairs.len(),
                path.cost,
                out.display()
            );
        }
        Command::Match {
            checkpoint,
            query,
            gallery,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let q = load_mesh(&query)?;
            let files = obj_files(&gallery)?;
            let meshes: Vec<TriangleMesh> = files.iter().map(|f| load_mesh(f)).collect::<anyhow::Result<_>>()?;
            let entries: Vec<(&TriangleMesh, u64)> = meshes.iter().zip(0u64..).collect();
            let ranked = tasks::match_shape(&ck.model, &q, &entries).context("matching")?;
            let rows: Vec<serde_json::Value> = ranked
                .iter()
                .enumerate()
                .map(|(rank, e)| {
                    serde_json::json!({
                        "rank": rank + 1,
                        "path": files[e.gallery_index].display().to_string(),
                        "distance": e.distance,
                    })
                })
                .collect();
            write_json(&out, &serde_json::Value::Array(rows))?;
            println!(
                "best match {} (distance {:.6}) among {} -> {}",
                files[ranked[0].gallery_index].display(),
                ranked[0].distance,
                files.len(),
                out.display()
            );
        }
        Command::Sample { checkpoint, n, seed, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let s = tasks::sample_prior(&ck.model, n, seed, &[]).map_err(|e| Failure::Usage(e.to_string()))?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (i, mesh) in s.meshes.iter().enumerate() {
                let p = out.join(format!("sample_{i:03}.obj"));
                write_obj(&p, mesh).with_context(|| format!("writing {}", p.display()))?;
            }
            let div = s.diversity.map_or("null".to_string(), |d| format!("{d:.6}"));
            println!("decoded {n} prior samples (seed {seed}, diversity {div}) -> {}", out.display());
        }
        Command::Serve {
            checkpoint,
            host,
            port,
            cors_origins,
            config,
        } => {
            let cfg = load_config(&config.config)?;
            let sc = dismesh_serve::ServeConfig {
                host: pick(m, "host", host, cfg.serve.host),
                port: pick(m, "port", port, cfg.serve.port),
                cors_origins: pick(m, "cors_origins", cors_origins, cfg.serve.cors_origins),
            };
            let ck = load_checkpoint(&checkpoint)?;
            println!("serving {} on http://{}:{} -> {}", ck.model_hash(), sc.host, sc.port, checkpoint.display());
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(dismesh_serve::serve(ck, &sc)).context("server")?;
        }
    }
    Ok(())
}

/// Joins the cause chain, skipping causes already printed by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if prev.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let sub = matches.subcommand().map(|(_, m)| m.clone()).expect("subcommand is required");
    let result = init_logging().and_then(|()| run(cli.command, &sub));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::FAILURE
        }
    }
}
