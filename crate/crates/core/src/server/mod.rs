//! Server side: client registry, task brokering and the FedAvg / cyclic workflows.

mod aggregate;
mod checkpoint;
mod communicator;
mod workflow;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::FilterError;
use crate::model::{FLModel, ModelError};
use crate::protocol::TaskStatus;
use crate::sfm::SfmError;

pub use aggregate::{aggregate_weighted, weighted_metric, ModelSelector, Weighting};
pub use checkpoint::{
    checkpoint_name, read_marker, save_model, save_model_with, write_marker, EventLog,
    BEST_MARKER, LATEST_MARKER,
};
pub use communicator::{ClientState, Communicator, ServerOptions};
pub use workflow::{sample_clients, ClientReport, Controller, RoundRecord};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("only {available} of {needed} clients available")]
    NotEnoughClients { needed: u32, available: u32 },
    #[error("{ok} OK results, {needed} required")]
    InsufficientResponses { ok: u32, needed: u32 },
    #[error("no results to aggregate")]
    EmptyResults,
    #[error("results disagree on parameter layout: {0}")]
    ShapeMismatch(String),
    #[error("total aggregation weight is zero")]
    ZeroTotalWeight,
    #[error("client {0} lost")]
    ClientLost(String),
    #[error("client {client} failed task: {reason}")]
    TaskFailed { client: String, reason: String },
    #[error("unknown client {0}")]
    UnknownClient(String),
    #[error("no targets given")]
    NoTargets,
    #[error("server is shut down")]
    ShutDown,
    #[error("invalid job config: {0}")]
    InvalidConfig(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("filter error: {0}")]
    Filter(#[from] FilterError),
    #[error("transport error: {0}")]
    Transport(#[from] SfmError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ServerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workflow {
    Fedavg,
    Cyclic,
}

#[derive(Debug, Clone)]
pub struct JobConfig {
    pub job_id: String,
    pub workflow: Workflow,
    pub num_rounds: u32,
    /// Clients sampled per round.
    pub min_clients: u32,
    /// OK results needed to aggregate; defaults to `min_clients`.
    pub min_responses: Option<u32>,
    pub task_timeout: Duration,
    /// How long to wait for enough clients to register.
    pub registration_timeout: Duration,
    pub checkpoint_dir: PathBuf,
    /// When set, every new global model is sent out as a `validate` task and scored.
    pub selection_metric: Option<String>,
    pub weighting: Weighting,
    pub seed: u64,
    /// Visit order for the cyclic workflow; lexicographic by name when empty.
    pub cyclic_order: Vec<String>,
}

impl JobConfig {
    pub fn new(workflow: Workflow, num_rounds: u32, min_clients: u32, checkpoint_dir: PathBuf) -> Self {
        JobConfig {
            job_id: "job".into(),
            workflow,
            num_rounds,
            min_clients,
            min_responses: None,
            task_timeout: Duration::from_secs(600),
            registration_timeout: Duration::from_secs(60),
            checkpoint_dir,
            selection_metric: None,
            weighting: Weighting::SampleCount,
            seed: 0,
            cyclic_order: Vec::new(),
        }
    }

    pub fn min_responses(&self) -> u32 {
        self.min_responses.unwrap_or(self.min_clients)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ServerError::InvalidConfig(m.to_owned()));
        if self.min_clients < 1 {
            return bad("min_clients must be >= 1");
        }
        if self.num_rounds < 1 {
            return bad("num_rounds must be >= 1");
        }
        if self.min_responses() < 1 || self.min_responses() > self.min_clients {
            return bad("min_responses must be in [1, min_clients]");
        }
        if self.workflow == Workflow::Cyclic && self.min_clients < 2 {
            return bad("cyclic workflow needs min_clients >= 2");
        }
        if self.job_id.is_empty() || self.job_id.contains('\n') {
            return bad("job_id must be a non-empty single line");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub task_id: u64,
    pub task_name: String,
    pub round: u32,
    pub payload: FLModel,
    pub timeout: Duration,
}

#[derive(Debug, Clone)]
pub struct TaskResult {
    pub task_id: u64,
    pub client_name: String,
    pub status: TaskStatus,
    /// Present exactly when `status` is OK.
    pub payload: Option<FLModel>,
    pub reason: Option<String>,
}

impl TaskResult {
    pub fn ok(task_id: u64, client_name: &str, payload: FLModel) -> Self {
        TaskResult {
            task_id,
            client_name: client_name.to_owned(),
            status: TaskStatus::Ok,
            payload: Some(payload),
            reason: None,
        }
    }

    pub fn failed(task_id: u64, client_name: &str, status: TaskStatus, reason: impl Into<String>) -> Self {
        TaskResult {
            task_id,
            client_name: client_name.to_owned(),
            status,
            payload: None,
            reason: Some(reason.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == TaskStatus::Ok
    }
}
