use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedsim_core::bench::{run_bench, BenchConfig, BenchError, BenchMode};
use fedsim_core::data::dirichlet_partition;
use fedsim_core::server::Workflow;
use fedsim_core::sim::{self, prepare_data, ServerJob, SimConfig, SimError, SimReport};

/// Exit code for configuration and input errors.
const EXIT_CONFIG: u8 = 2;
const EXIT_FAILED: u8 = 1;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated learning simulator and tools")]
struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a server and all clients in one process.
    Simulate(SimArgs),
    /// Run only the server of a simulation config.
    Server {
        #[command(flatten)]
        sim: SimArgs,
        /// Address to listen on, e.g. 127.0.0.1:8002.
        #[arg(long)]
        address: Option<String>,
    },
    /// Run one client of a simulation config against a running server.
    Client {
        #[command(flatten)]
        sim: SimArgs,
        /// Server address.
        #[arg(long)]
        address: String,
        /// 1-based client index; the client is named `site-<index>`.
        #[arg(long)]
        index: u32,
    },
    /// Dirichlet label partition of a labels file (one integer per line).
    Partition {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        clients: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Large-model streaming benchmark.
    BenchStream(BenchArgs),
}

#[derive(Args)]
struct SimArgs {
    /// JSON simulation config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    clients: Option<u32>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Transport driver: inproc or tcp.
    #[arg(long)]
    driver: Option<String>,
    #[arg(long)]
    chunk_size: Option<u64>,
    #[arg(long, value_enum)]
    workflow: Option<WorkflowArg>,
    /// Output directory for report.json, events.jsonl and checkpoints.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WorkflowArg {
    Fedavg,
    Cyclic,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON bench config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    keys: Option<usize>,
    /// Bytes per key.
    #[arg(long)]
    key_bytes: Option<u64>,
    /// Total parameter bytes, split evenly over the keys.
    #[arg(long)]
    size: Option<u64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    chunk_size: Option<u64>,
    #[arg(long)]
    driver: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Refuse payloads larger than this many bytes.
    #[arg(long)]
    max_bytes: Option<u64>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Blob,
    File,
}

/// An error that maps to a specific exit code.
struct Exit(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        Exit(EXIT_FAILED, e.into())
    }
}

fn config_error(e: impl Into<anyhow::Error>) -> Exit {
    Exit(EXIT_CONFIG, e.into())
}

fn sim_error(e: SimError) -> Exit {
    match e {
        SimError::Config { .. } | SimError::Data(_) => config_error(e),
        other => Exit(EXIT_FAILED, other.into()),
    }
}

impl SimArgs {
    fn load(&self) -> Result<SimConfig, Exit> {
        let mut cfg = SimConfig::load(&self.config).map_err(sim_error)?;
        if let Some(v) = self.rounds {
            cfg.rounds = v;
        }
        if let Some(v) = self.clients {
            cfg.clients = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.driver {
            cfg.driver = v.clone();
        }
        if let Some(v) = self.chunk_size {
            cfg.chunk_size = Some(v);
        }
        if let Some(v) = self.workflow {
            cfg.workflow = match v {
                WorkflowArg::Fedavg => Workflow::Fedavg,
                WorkflowArg::Cyclic => Workflow::Cyclic,
            };
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        cfg.validate().map_err(sim_error)?;
        Ok(cfg)
    }
}

fn finish_job(report: &SimReport, out_dir: &std::path::Path) -> Result<(), Exit> {
    let summary = serde_json::json!({
        "status": report.status,
        "rounds": report.rounds.len(),
        "final_metrics": report.final_metrics,
        "best_round": report.best_round,
        "final_checkpoint": report.final_checkpoint,
        "final_checkpoint_sha256": report.final_checkpoint_sha256,
        "report": out_dir.join(sim::REPORT_FILE),
    });
    emit(&serde_json::to_string_pretty(&summary)?)?;
    match &report.error {
        Some(e) => Err(Exit(EXIT_FAILED, anyhow::anyhow!("job failed: {e}"))),
        None => Ok(()),
    }
}

fn cmd_simulate(args: &SimArgs) -> Result<(), Exit> {
    let cfg = args.load()?;
    let report = sim::run_simulation(&cfg).map_err(sim_error)?;
    finish_job(&report, &cfg.out_dir)
}

fn cmd_server(args: &SimArgs, address: Option<String>) -> Result<(), Exit> {
    let mut cfg = args.load()?;
    if address.is_some() {
        cfg.address = address;
    }
    let data = prepare_data(&cfg).map_err(sim_error)?;
    let job = ServerJob::start(cfg.clone(), data).map_err(sim_error)?;
    eprintln!("listening on {}", job.address());
    let comm = job.communicator().clone();
    ctrlc::set_handler(move || {
        eprintln!("interrupted; ending job");
        comm.end_job(std::time::Duration::from_secs(2));
        comm.shutdown();
        std::process::exit(130);
    })
    .context("installing Ctrl-C handler")?;
    let report = job.run().map_err(sim_error)?;
    finish_job(&report, &cfg.out_dir)
}

fn cmd_client(args: &SimArgs, address: &str, index: u32) -> Result<(), Exit> {
    let cfg = args.load()?;
    if index < 1 || index > cfg.clients {
        return Err(config_error(anyhow::anyhow!(
            "--index {index} is outside 1..={}",
            cfg.clients
        )));
    }
    let data = prepare_data(&cfg).map_err(sim_error)?;
    let shard = &data.shards[index as usize - 1];
    let outcome = sim::run_client(&cfg, shard, address).map_err(sim_error)?;
    let summary = serde_json::json!({
        "client": outcome.name,
        "trained": outcome.summary.trained,
        "validated": outcome.summary.validated,
        "failed": outcome.summary.failed,
        "bytes_sent": outcome.stats.bytes_sent,
        "bytes_received": outcome.stats.bytes_received,
    });
    emit(&serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn cmd_partition(labels: &PathBuf, clients: usize, alpha: f64, seed: u64) -> Result<(), Exit> {
    let text = std::fs::read_to_string(labels)
        .with_context(|| format!("reading {}", labels.display()))
        .map_err(config_error)?;
    let ids: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .with_context(|| format!("line {}: {l:?} is not a non-negative integer", i + 1))
        })
        .collect::<Result<_>>()
        .map_err(config_error)?;
    let classes = ids.iter().max().map_or(0, |m| m + 1);
    let spec = dirichlet_partition(&ids, classes, clients, alpha, seed).map_err(config_error)?;
    emit(&serde_json::to_string_pretty(&spec)?)
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Exit> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(config_error)?;
            serde_json::from_str::<BenchConfig>(&text).map_err(config_error)?
        }
        None => BenchConfig::default(),
    };
    if let Some(v) = args.keys {
        cfg.keys = v;
    }
    if let Some(v) = args.key_bytes {
        cfg.key_bytes = v;
    }
    if let Some(size) = args.size {
        if size == 0 {
            cfg.keys = 0;
        } else {
            let keys = cfg.keys.max(1) as u64;
            if size % (keys * 4) != 0 {
                return Err(config_error(anyhow::anyhow!(
                    "--size {size} must split into {keys} keys of whole f32 elements"
                )));
            }
            cfg.key_bytes = size / keys;
        }
    }
    if let Some(v) = args.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = args.clients {
        cfg.clients = v;
    }
    if let Some(v) = args.chunk_size {
        cfg.chunk_size = v;
    }
    if let Some(v) = &args.driver {
        cfg.driver = v.clone();
    }
    if let Some(v) = args.mode {
        cfg.mode = match v {
            ModeArg::Blob => BenchMode::Blob,
            ModeArg::File => BenchMode::File,
        };
    }
    if let Some(v) = args.max_bytes {
        cfg.max_payload_bytes = v;
    }
    if let Some(v) = &args.work_dir {
        cfg.work_dir = Some(v.clone());
    }
    let report = run_bench(&cfg).map_err(|e| match e {
        BenchError::GuardExceeded { .. } | BenchError::Invalid(_) => config_error(e),
        other => Exit(EXIT_FAILED, other.into()),
    })?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        std::fs::write(out, &json).with_context(|| format!("writing {}", out.display()))?;
    }
    emit(&json)
}

/// Prints `text` to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), Exit> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Exit(EXIT_FAILED, e.into())),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing_subscriber::filter::LevelFilter::WARN,
        1 => tracing_subscriber::filter::LevelFilter::INFO,
        _ => tracing_subscriber::filter::LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    let outcome = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Server { sim, address } => cmd_server(sim, address.clone()),
        Command::Client { sim, address, index } => cmd_client(sim, address, *index),
        Command::Partition {
            labels,
            clients,
            alpha,
            seed,
        } => cmd_partition(labels, *clients, *alpha, *seed),
        Command::BenchStream(args) => cmd_bench(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
