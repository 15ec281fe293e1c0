use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use swipecf_core::abtest::{compare, Experiment};
use swipecf_core::dedup::{cluster_products, DEFAULT_THRESHOLD};
use swipecf_core::eventstore::{
    read_catalogue, write_catalogue, write_registry, Durability, EventEnvelope, EventStore,
    ReplayFilter, ReplayMode, StoreReader, CATALOGUE_FILE, CLUSTERS_FILE, REGISTRY_FILE,
    SNAPSHOT_FILE,
};
use swipecf_core::model::{TimeWindow, UserId};
use swipecf_core::recommender::DEFAULT_QUEUE_LEN;
use swipecf_core::simulator::{generate, LatentStyleModel, SimulationConfig};

use swipecf_cli::engine::{evaluate_store, ingest_text, parse_window, read_cluster_map, Engine};
use swipecf_cli::error::AppError;
use swipecf_cli::server;

const RECOMMENDATION_LOG: &str = "recommendations.jsonl";

#[derive(Debug, Parser)]
#[command(name = "swipecf", version, about = "Swipe-feedback recommender tools")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = "SWIPECF_STORE")]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate events (JSON lines or a JSON array) and append them to the store.
    Ingest {
        /// Events file, or `-` for stdin.
        file: PathBuf,
    },
    /// Cluster near-duplicate product titles and write the cluster map.
    Dedup {
        /// Catalogue as JSON lines, or CSV when the extension is `.csv`.
        catalogue: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value = CLUSTERS_FILE)]
        out: PathBuf,
    },
    /// Recommend products for one user.
    Recommend {
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = DEFAULT_QUEUE_LEN)]
        n: usize,
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// Dataset, funnel, similarity-bucket and user metrics.
    Evaluate {
        /// `FROM..TO` in epoch milliseconds or RFC 3339; either side may be empty.
        #[arg(long)]
        window: Option<String>,
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// Compare the variants of an experiment.
    Abtest {
        /// Experiment definition (JSON).
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        window: Option<String>,
    },
    /// Generate a synthetic store.
    Simulate {
        /// Simulation config (JSON); omitted fields take their defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a matrix snapshot into the store.
    Snapshot {
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        #[arg(long)]
        clusters: Option<PathBuf>,
        /// Seconds between engine rebuilds.
        #[arg(long, default_value_t = 60)]
        refresh_secs: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print<T: Serialize>(value: &T) -> Result<(), AppError> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| AppError::Io(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn store_dir(store: Option<PathBuf>) -> Result<PathBuf, AppError> {
    store.ok_or_else(|| {
        AppError::InvalidArgument("no store given: pass --store or set SWIPECF_STORE".into())
    })
}

fn read_input(path: &Path) -> Result<String, AppError> {
    let mut text = String::new();
    if path == Path::new("-") {
        io::stdin().read_to_string(&mut text)?;
    } else {
        text = fs::read_to_string(path)
            .map_err(|e| AppError::InvalidArgument(format!("{}: {e}", path.display())))?;
    }
    Ok(text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AppError> {
    serde_json::from_str(&read_input(path)?)
        .map_err(|e| AppError::validation(format!("{}: {e}", path.display())))
}

fn window(arg: Option<String>) -> Result<TimeWindow, AppError> {
    arg.as_deref().map_or(Ok(TimeWindow::ALL), parse_window)
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Ingest { file } => {
            let text = read_input(&file)?;
            let mut store = EventStore::create(store_dir(cli.store)?)?;
            let report = ingest_text(&mut store, &text)?;
            print(&report)?;
            if report.rejected > 0 {
                return Err(AppError::Validation {
                    message: format!(
                        "{} of {} records rejected",
                        report.rejected,
                        report.accepted + report.rejected
                    ),
                    report: Some(report),
                });
            }
            Ok(())
        }
        Command::Dedup {
            catalogue,
            threshold,
            out,
        } => {
            let products = read_catalogue(&catalogue)?;
            let map = cluster_products(&products, threshold)?;
            map.write_csv(BufWriter::new(fs::File::create(&out)?))?;
            print(&json!({
                "products": products.len(),
                "clusters": map.cluster_count(),
                "threshold": threshold,
                "out": out,
            }))
        }
        Command::Recommend { user, n, clusters } => {
            let map = clusters.as_deref().map(read_cluster_map).transpose()?;
            let engine = Engine::load(&store_dir(cli.store)?, map.as_ref())?;
            print(&engine.recommend(&UserId::new(user), n)?)
        }
        Command::Evaluate {
            window: w,
            clusters,
        } => {
            let map = clusters.as_deref().map(read_cluster_map).transpose()?;
            print(&evaluate_store(
                &store_dir(cli.store)?,
                window(w)?,
                map.as_ref(),
            )?)
        }
        Command::Abtest {
            experiment,
            window: w,
        } => {
            let exp: Experiment = read_json(&experiment)?;
            exp.validate()?;
            let reader = StoreReader::open(store_dir(cli.store)?)?;
            let events = reader
                .replay(&ReplayFilter::all(), ReplayMode::Lenient)?
                .into_events();
            print(&compare(&events, &exp, &window(w)?))
        }
        Command::Simulate { config, out } => simulate(&read_json(&config)?, &out),
        Command::Snapshot { clusters } => {
            let map = clusters.as_deref().map(read_cluster_map).transpose()?;
            let dir = store_dir(cli.store)?;
            let snap = StoreReader::open(&dir)?.snapshot(map.as_ref())?;
            snap.write(dir.join(SNAPSHOT_FILE))?;
            print(&json!({
                "position": snap.position,
                "as_of": snap.as_of,
                "users": snap.matrix.n_users(),
                "products": snap.matrix.n_products(),
            }))
        }
        Command::Serve {
            listen,
            clusters,
            refresh_secs,
        } => {
            let map = clusters.as_deref().map(read_cluster_map).transpose()?;
            let dir = store_dir(cli.store)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(
                dir,
                listen,
                map,
                Duration::from_secs(refresh_secs.max(1)),
            ))
        }
    }
}

fn simulate(config: &SimulationConfig, out: &Path) -> Result<(), AppError> {
    config.validate()?;
    let mut store = EventStore::create(out)?.with_durability(Durability::Flush);
    if !store.is_empty() {
        return Err(AppError::InvalidArgument(format!(
            "{} already holds events",
            out.display()
        )));
    }
    let log = generate(config, &LatentStyleModel::clustered(config))?;
    let envelopes: Vec<EventEnvelope> =
        log.events.iter().cloned().map(EventEnvelope::new).collect();
    let report = store.append_batch(&envelopes)?;
    write_catalogue(out.join(CATALOGUE_FILE), &log.catalogue)?;
    write_registry(out.join(REGISTRY_FILE), &log.users)?;
    let mut recs = BufWriter::new(fs::File::create(out.join(RECOMMENDATION_LOG))?);
    for rec in &log.recommendations {
        serde_json::to_writer(&mut recs, rec).map_err(|e| AppError::Io(e.to_string()))?;
        writeln!(recs)?;
    }
    recs.flush()?;
    if let Some(map) = &log.cluster_map {
        map.write_csv(BufWriter::new(fs::File::create(out.join(CLUSTERS_FILE))?))?;
    }
    print(&json!({
        "out": out,
        "events": report.accepted,
        "swipes": log.swipes().count(),
        "recommendations": log.recommendations.len(),
        "users": log.users.len(),
        "products": log.catalogue.len(),
    }))
}
