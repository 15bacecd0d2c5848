//! Seeded end-to-end simulations: synthetic data, Dirichlet partitioning, one server and N
//! clients that talk only through the transport.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::info;

use crate::client::{
    run_client_loop, ClientConfig, ClientContext, ClientError, LocalTrainer, LoopSummary, ReconnectPolicy,
};
use crate::data::{
    self, dirichlet_partition, make_blobs, make_regression, Arch, Batch, DataError, LabeledDataset, Labels,
    PartitionSpec, TrainConfig,
};
use crate::filters::{validate_chain, FilterSpec};
use crate::model::FLModel;
use crate::server::{
    checkpoint_name, Communicator, Controller, EventLog, JobConfig, RoundRecord, ServerError, ServerOptions,
    Weighting, Workflow,
};
use crate::sfm::{driver_for, ChunkSize, EndpointStats, SfmConfig};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_FILE: &str = "report.json";
pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("server error: {0}")]
    Server(#[from] ServerError),
    #[error("client error: {0}")]
    Client(#[from] ClientError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SimError {
    fn config(field: &str, reason: impl Into<String>) -> Self {
        SimError::Config {
            field: field.to_owned(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        n: usize,
        dim: usize,
        classes: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    Regression {
        n: usize,
        dim: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

fn default_spread() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub arch: Arch,
    pub lr: f64,
    /// Local epochs per round.
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: Batch,
}

fn default_batch() -> Batch {
    Batch::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_job_id")]
    pub job_id: String,
    #[serde(default = "default_workflow")]
    pub workflow: Workflow,
    pub rounds: u32,
    pub clients: u32,
    /// Clients sampled per round; all of them by default.
    #[serde(default)]
    pub min_clients: Option<u32>,
    #[serde(default)]
    pub min_responses: Option<u32>,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    /// Dirichlet concentration for the label partition (classification datasets only).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Share of the corpus held out as the server's global test set.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Share of each client's shard kept for local validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub trainer: TrainerConfig,
    /// Server-side filters.
    #[serde(default)]
    pub filters: Vec<FilterSpec>,
    /// Filters every client applies.
    #[serde(default)]
    pub client_filters: Vec<FilterSpec>,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default = "default_driver")]
    pub driver: String,
    /// Listen address; an unused name (in-process) or an ephemeral port (TCP) by default.
    #[serde(default)]
    pub address: Option<String>,
    #[serde(default)]
    pub chunk_size: Option<u64>,
    #[serde(default)]
    pub heartbeat_secs: Option<f64>,
    #[serde(default = "default_task_timeout")]
    pub task_timeout_secs: f64,
    #[serde(default = "default_registration_timeout")]
    pub registration_timeout_secs: f64,
    #[serde(default)]
    pub reconnect: ReconnectPolicy,
    #[serde(default)]
    pub selection_metric: Option<String>,
    #[serde(default)]
    pub cyclic_order: Vec<String>,
    /// Also train one model per client on its own data only.
    #[serde(default)]
    pub local_baselines: bool,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_job_id() -> String {
    "fedsim".into()
}

fn default_workflow() -> Workflow {
    Workflow::Fedavg
}

fn default_alpha() -> f64 {
    1.0
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_driver() -> String {
    "inproc".into()
}

fn default_task_timeout() -> f64 {
    600.0
}

fn default_registration_timeout() -> f64 {
    60.0
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("fedsim-out")
}

static NEXT_INPROC: AtomicU64 = AtomicU64::new(0);

fn positive_secs(field: &str, v: f64) -> Result<Duration> {
    if v.is_finite() && v > 0.0 {
        Ok(Duration::from_secs_f64(v))
    } else {
        Err(SimError::config(field, format!("must be a positive number of seconds, got {v}")))
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = json_field(e.path(), e.inner());
            SimError::config(&field, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn min_clients(&self) -> u32 {
        self.min_clients.unwrap_or(self.clients)
    }

    pub fn client_names(&self) -> Vec<String> {
        (1..=self.clients).map(|i| format!("site-{i}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(SimError::config("rounds", "must be >= 1"));
        }
        if self.clients < 1 {
            return Err(SimError::config("clients", "must be >= 1"));
        }
        let min = self.min_clients();
        if min < 1 || min > self.clients {
            return Err(SimError::config(
                "min_clients",
                format!("{min} is outside 1..={} (the number of clients)", self.clients),
            ));
        }
        if let Some(r) = self.min_responses {
            if r < 1 || r > min {
                return Err(SimError::config("min_responses", format!("{r} is outside 1..={min}")));
            }
        }
        if self.workflow == Workflow::Cyclic && self.clients < 2 {
            return Err(SimError::config("clients", "the cyclic workflow needs at least 2"));
        }
        let names = self.client_names();
        if let Some(bad) = self.cyclic_order.iter().find(|n| !names.contains(n)) {
            return Err(SimError::config("cyclic_order", format!("unknown client {bad:?}")));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(SimError::config("alpha", format!("must be > 0, got {}", self.alpha)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(SimError::config("test_fraction", "must be in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(SimError::config("val_fraction", "must be in [0, 1)"));
        }
        if !(self.trainer.lr.is_finite() && self.trainer.lr > 0.0) {
            return Err(SimError::config("trainer.lr", "must be > 0"));
        }
        if self.trainer.batch == Batch::Size(0) {
            return Err(SimError::config("trainer.batch", "batch size must be >= 1"));
        }
        match (&self.dataset, &self.trainer.arch) {
            (DatasetConfig::Blobs { classes, .. }, Arch::Classifier { hidden }) => {
                if *classes < 2 {
                    return Err(SimError::config("dataset.classes", "must be >= 2"));
                }
                if hidden.contains(&0) {
                    return Err(SimError::config("trainer.arch.hidden", "layer widths must be >= 1"));
                }
            }
            (DatasetConfig::Regression { .. }, Arch::Linear) => {}
            _ => {
                return Err(SimError::config(
                    "trainer.arch",
                    "blobs need a classifier and regression needs linear",
                ))
            }
        }
        validate_chain(&self.filters).map_err(|e| SimError::config("filters", e.to_string()))?;
        validate_chain(&self.client_filters).map_err(|e| SimError::config("client_filters", e.to_string()))?;
        driver_for(&self.driver).map_err(|e| SimError::config("driver", e.to_string()))?;
        if let Some(c) = self.chunk_size {
            ChunkSize::new(c).map_err(|e| SimError::config("chunk_size", e.to_string()))?;
        }
        if let Some(h) = self.heartbeat_secs {
            positive_secs("heartbeat_secs", h)?;
        }
        positive_secs("task_timeout_secs", self.task_timeout_secs)?;
        positive_secs("registration_timeout_secs", self.registration_timeout_secs)?;
        if let Some(m) = &self.selection_metric {
            // the selector keeps the highest value, so only accuracy qualifies
            if m != "accuracy" || self.trainer.arch == Arch::Linear {
                return Err(SimError::config(
                    "selection_metric",
                    format!("only \"accuracy\" with a classifier is supported, got {m:?}"),
                ));
            }
        }
        Ok(())
    }

    pub fn sfm_config(&self) -> SfmConfig {
        let mut cfg = SfmConfig::default();
        if let Some(c) = self.chunk_size.and_then(|c| ChunkSize::new(c).ok()) {
            cfg = cfg.with_chunk_size(c);
        }
        if let Some(h) = self.heartbeat_secs {
            cfg = cfg.with_heartbeat(Duration::from_secs_f64(h));
        }
        cfg
    }

    pub fn listen_address(&self) -> String {
        match (&self.address, self.driver.as_str()) {
            (Some(a), _) => a.clone(),
            (None, "tcp") => "127.0.0.1:0".into(),
            (None, _) => format!(
                "fedsim-{}-{}",
                std::process::id(),
                NEXT_INPROC.fetch_add(1, Ordering::Relaxed)
            ),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.trainer.lr,
            epochs: self.trainer.epochs,
            batch: self.trainer.batch,
            seed: self.seed,
        }
    }

    fn job_config(&self) -> JobConfig {
        let mut job = JobConfig::new(
            self.workflow,
            self.rounds,
            self.min_clients(),
            self.out_dir.join(CHECKPOINT_DIR),
        );
        job.job_id = self.job_id.clone();
        job.min_responses = self.min_responses;
        job.task_timeout = Duration::from_secs_f64(self.task_timeout_secs);
        job.registration_timeout = Duration::from_secs_f64(self.registration_timeout_secs);
        job.selection_metric = self.selection_metric.clone();
        job.weighting = self.weighting;
        job.seed = self.seed;
        job.cyclic_order = self.cyclic_order.clone();
        job
    }
}

/// Best-effort name of the offending field from a serde_json error message.
/// Dotted path of the offending field; a missing field is appended to its parent's path.
fn json_field(path: &serde_path_to_error::Path, e: &serde_json::Error) -> String {
    let parent = path.to_string();
    let missing = e
        .to_string()
        .split("missing field `")
        .nth(1)
        .and_then(|r| r.split('`').next())
        .map(str::to_owned);
    match (parent.as_str(), missing) {
        (".", Some(name)) => name,
        (_, Some(name)) => format!("{parent}.{name}"),
        (".", None) => "config".into(),
        (_, None) => parent,
    }
}

#[derive(Debug, Clone)]
pub struct ClientShard {
    pub name: String,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
}

#[derive(Debug, Clone)]
pub struct SimData {
    pub test: LabeledDataset,
    pub shards: Vec<ClientShard>,
    /// Present for classification corpora.
    pub partition: Option<PartitionSpec>,
    pub dim: usize,
    pub classes: usize,
}

/// Generates the corpus, holds out the global test set and partitions the rest. Every
/// process derives the same data from the same config.
pub fn prepare_data(cfg: &SimConfig) -> Result<SimData> {
    let (corpus, dim, classes) = match cfg.dataset {
        DatasetConfig::Blobs {
            n,
            dim,
            classes,
            spread,
        } => (make_blobs(n, dim, classes, spread, cfg.seed)?, dim, classes),
        DatasetConfig::Regression { n, dim, noise } => (make_regression(n, dim, noise, cfg.seed)?.0, dim, 0),
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5eed_7e57));
    let n_test = ((corpus.len() as f64) * cfg.test_fraction).round() as usize;
    if n_test == 0 || n_test >= corpus.len() {
        return Err(SimError::config("test_fraction", "leaves an empty train or test set"));
    }
    let test = corpus.subset(&order[..n_test]);
    let pool = corpus.subset(&order[n_test..]);
    let n_clients = cfg.clients as usize;
    if pool.len() < n_clients {
        return Err(SimError::config("dataset.n", "fewer training samples than clients"));
    }

    let (assignments, partition) = match &pool.labels {
        Labels::Classes { ids, classes } => {
            let spec = dirichlet_partition(ids, *classes, n_clients, cfg.alpha, cfg.seed)?;
            (spec.assignments.clone(), Some(spec))
        }
        Labels::Values(_) => {
            let per = pool.len() / n_clients;
            let extra = pool.len() % n_clients;
            let mut start = 0;
            let parts = (0..n_clients)
                .map(|i| {
                    let len = per + usize::from(i < extra);
                    let part: Vec<usize> = (start..start + len).collect();
                    start += len;
                    part
                })
                .collect();
            (parts, None)
        }
    };

    let shards = cfg
        .client_names()
        .into_iter()
        .zip(assignments)
        .map(|(name, idx)| {
            let shard = pool.subset(&idx);
            let n_val = ((shard.len() as f64) * cfg.val_fraction).floor() as usize;
            let (train, val) = shard.split(shard.len() - n_val);
            // tiny shards validate on their training data
            let val = if val.is_empty() { train.clone() } else { val };
            ClientShard { name, train, val }
        })
        .collect();
    Ok(SimData {
        test,
        shards,
        partition,
        dim,
        classes,
    })
}

pub fn initial_model(cfg: &SimConfig, data: &SimData) -> Result<FLModel> {
    let params = data::init_params(&cfg.trainer.arch, data.dim, data.classes, cfg.seed)?;
    Ok(FLModel::new(params))
}

pub fn client_config(cfg: &SimConfig, name: &str, address: &str) -> ClientConfig {
    let mut c = ClientConfig::new(name, &cfg.driver, address);
    c.heartbeat_secs = cfg.heartbeat_secs;
    c.filters = cfg.client_filters.clone();
    c.reconnect = cfg.reconnect;
    c.chunk_size = cfg.chunk_size;
    c
}

pub fn client_trainer(cfg: &SimConfig, shard: &ClientShard) -> LocalTrainer {
    LocalTrainer::new(
        cfg.trainer.arch.clone(),
        shard.train.clone(),
        shard.val.clone(),
        cfg.train_config(),
    )
}

/// Connects, registers and serves tasks until the job ends.
pub fn run_client(cfg: &SimConfig, shard: &ClientShard, address: &str) -> Result<ClientOutcome> {
    let mut ctx = ClientContext::init(client_config(cfg, &shard.name, address))?;
    let mut trainer = client_trainer(cfg, shard);
    let summary = run_client_loop(&mut ctx, &mut trainer)?;
    Ok(ClientOutcome {
        name: shard.name.clone(),
        summary,
        stats: ctx.transport_stats(),
    })
}

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub name: String,
    pub summary: LoopSummary,
    pub stats: EndpointStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub sent: u64,
    pub received: u64,
}

impl Traffic {
    fn between(before: &EndpointStats, after: &EndpointStats) -> Self {
        Traffic {
            sent: after.bytes_sent - before.bytes_sent,
            received: after.bytes_received - before.bytes_received,
        }
    }

    fn add(self, other: Traffic) -> Traffic {
        Traffic {
            sent: self.sent + other.sent,
            received: self.received + other.received,
        }
    }
}

/// Server-side SFM byte counts. `registration + Σ rounds + teardown == total`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ByteReport {
    pub registration: Traffic,
    pub rounds: Traffic,
    pub teardown: Traffic,
    pub total: Traffic,
    /// Client-side totals, when the clients ran in this process.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clients: Option<Traffic>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientSummary {
    pub name: String,
    pub train_samples: usize,
    pub val_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_counts: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalBaseline {
    pub name: String,
    /// Metrics on the global test set.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub job_id: String,
    pub workflow: Workflow,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub num_rounds: u32,
    pub seed: u64,
    pub alpha: f64,
    pub clients: Vec<ClientSummary>,
    pub rounds: Vec<RoundRecord>,
    pub best_round: Option<u32>,
    pub best_metric: Option<f64>,
    pub best_checkpoint: Option<String>,
    /// Server-side metrics of the final global model on the global test set.
    pub final_metrics: BTreeMap<String, f64>,
    pub final_checkpoint: Option<String>,
    pub final_checkpoint_sha256: Option<String>,
    /// Relative to the output directory.
    pub checkpoints: Vec<String>,
    pub bytes: ByteReport,
    pub local_baselines: Vec<LocalBaseline>,
}

impl SimReport {
    pub fn completed(&self) -> bool {
        self.status == JobStatus::Completed
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(REPORT_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}

/// Trains one model per client on its own training data for `rounds × epochs` epochs and
/// scores it on the global test set.
pub fn local_baselines(cfg: &SimConfig, data: &SimData) -> Result<Vec<LocalBaseline>> {
    let init = initial_model(cfg, data)?;
    let tc = TrainConfig {
        epochs: cfg.trainer.epochs * cfg.rounds as usize,
        ..cfg.train_config()
    };
    data.shards
        .iter()
        .map(|s| {
            let params = data::train(&cfg.trainer.arch, &init.params, &s.train, &tc)?;
            Ok(LocalBaseline {
                name: s.name.clone(),
                metrics: data::evaluate(&cfg.trainer.arch, &params, &data.test)?,
            })
        })
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The server half of a simulation: listening, waiting for clients, running the workflow
/// and writing `report.json`.
pub struct ServerJob {
    cfg: SimConfig,
    data: SimData,
    comm: Arc<Communicator>,
}

impl ServerJob {
    pub fn start(cfg: SimConfig, data: SimData) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.out_dir)?;
        let driver = driver_for(&cfg.driver).map_err(|e| SimError::config("driver", e.to_string()))?;
        let options = ServerOptions {
            sfm: cfg.sfm_config(),
            job_id: cfg.job_id.clone(),
            ..ServerOptions::default()
        };
        let comm = Communicator::start(driver.as_ref(), &cfg.listen_address(), options)?;
        info!(address = comm.address(), driver = %cfg.driver, "server listening");
        Ok(ServerJob {
            cfg,
            data,
            comm: Arc::new(comm),
        })
    }

    pub fn address(&self) -> &str {
        self.comm.address()
    }

    pub fn communicator(&self) -> &Arc<Communicator> {
        &self.comm
    }

    /// Runs the job to completion or failure and writes the report; errors here are about
    /// the output directory only.
    pub fn run(self) -> Result<SimReport> {
        let cfg = &self.cfg;
        let events = Arc::new(EventLog::create(&cfg.out_dir.join(EVENTS_FILE))?);
        let arch = cfg.trainer.arch.clone();
        let test = self.data.test.clone();
        let mut ctl = Controller::new(self.comm.clone(), cfg.job_config())
            .with_filters(cfg.filters.clone())
            .with_events(events.clone())
            .with_evaluator(move |m: &FLModel| data::evaluate(&arch, &m.params, &test).unwrap_or_default());

        let registration_timeout = Duration::from_secs_f64(cfg.registration_timeout_secs);
        let start = EndpointStats::default();
        let outcome = self
            .comm
            .wait_for_clients(cfg.clients, registration_timeout)
            .map_err(SimError::from)
            .and_then(|_| {
                let registered = self.comm.total_stats();
                let init = initial_model(cfg, &self.data)?;
                Ok((registered, ctl.run(init)))
            });
        let (registered, result) = match outcome {
            Ok((registered, result)) => (registered, result.map_err(SimError::from)),
            Err(e) => {
                events.emit("error", serde_json::json!({"status": "aborted", "error": e.to_string()}));
                (self.comm.total_stats(), Err(e))
            }
        };
        self.comm.end_job(Duration::from_secs(10));
        self.comm.shutdown();
        let total = self.comm.total_stats();

        let history = ctl.history().to_vec();
        let rounds_traffic = history.iter().fold(Traffic::default(), |acc, r| {
            acc.add(Traffic {
                sent: r.bytes_sent,
                received: r.bytes_received,
            })
        });
        let registration = Traffic::between(&start, &registered);
        let all = Traffic::between(&start, &total);
        let teardown = Traffic {
            sent: all.sent - registration.sent - rounds_traffic.sent,
            received: all.received - registration.received - rounds_traffic.received,
        };

        let checkpoints: Vec<String> = history
            .iter()
            .map(|r| format!("{CHECKPOINT_DIR}/{}", r.checkpoint))
            .collect();
        let final_checkpoint = checkpoints.last().cloned();
        let final_checkpoint_sha256 = match &final_checkpoint {
            Some(c) => Some(sha256_hex(&std::fs::read(cfg.out_dir.join(c))?)),
            None => None,
        };
        let best = ctl.best();
        let local_baselines = if cfg.local_baselines {
            local_baselines(cfg, &self.data)?
        } else {
            Vec::new()
        };
        let clients = self
            .data
            .shards
            .iter()
            .enumerate()
            .map(|(i, s)| ClientSummary {
                name: s.name.clone(),
                train_samples: s.train.len(),
                val_samples: s.val.len(),
                class_counts: self.data.partition.as_ref().map(|p| p.per_class_counts[i].clone()),
            })
            .collect();

        let report = SimReport {
            job_id: cfg.job_id.clone(),
            workflow: cfg.workflow,
            status: if result.is_ok() {
                JobStatus::Completed
            } else {
                JobStatus::Failed
            },
            error: result.as_ref().err().map(ToString::to_string),
            num_rounds: cfg.rounds,
            seed: cfg.seed,
            alpha: cfg.alpha,
            clients,
            final_metrics: history.last().map(|r| r.global_metrics.clone()).unwrap_or_default(),
            rounds: history,
            best_round: best.map(|b| b.0),
            best_metric: best.map(|b| b.1),
            best_checkpoint: best.map(|b| format!("{CHECKPOINT_DIR}/{}", checkpoint_name(b.0))),
            final_checkpoint,
            final_checkpoint_sha256,
            checkpoints,
            bytes: ByteReport {
                registration,
                rounds: rounds_traffic,
                teardown,
                total: all,
                clients: None,
            },
            local_baselines,
        };
        report.write(&cfg.out_dir)?;
        Ok(report)
    }
}

/// Runs the server and every client in this process; they share nothing but the transport.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let shards = data.shards.clone();
    let job = ServerJob::start(cfg.clone(), data)?;
    let address = job.address().to_owned();
    let clients: Vec<_> = shards
        .into_iter()
        .map(|shard| {
            let cfg = cfg.clone();
            let address = address.clone();
            thread::Builder::new()
                .name(shard.name.clone())
                .spawn(move || run_client(&cfg, &shard, &address))
                .expect("spawn client")
        })
        .collect();
    let mut report = job.run()?;
    let mut client_traffic = Traffic::default();
    for c in clients {
        match c.join().expect("client thread panicked") {
            Ok(outcome) => {
                client_traffic = client_traffic.add(Traffic {
                    sent: outcome.stats.bytes_sent,
                    received: outcome.stats.bytes_received,
                })
            }
            Err(e) => tracing::warn!(error = %e, "client ended with an error"),
        }
    }
    report.bytes.clients = Some(client_traffic);
    report.write(&cfg.out_dir)?;
    Ok(report)
}
