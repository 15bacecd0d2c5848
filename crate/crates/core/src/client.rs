//! Client side: the `init` / `receive` / `send` API and the train loop built on it.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::data::{self, Arch, LabeledDataset, TrainConfig};
use crate::filters::{apply_chain, validate_chain, Direction, FilterError, FilterSpec};
use crate::model::{decode_model, encode_model, FLModel, ModelError, ParamMap};
use crate::protocol::*;
use crate::sfm::{driver_for, ChunkSize, Endpoint, EndpointStats, Message, Role, SfmConfig, SfmError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("client name {0:?} is already registered")]
    DuplicateName(String),
    #[error("server rejected registration: {0}")]
    Rejected(String),
    #[error("job is not running")]
    NotRunning,
    #[error("a task is pending; send its result first")]
    TaskPending,
    #[error("no pending task")]
    NoPendingTask,
    #[error("task payload could not be decoded: {0}")]
    Decode(#[from] ModelError),
    #[error("filter error: {0}")]
    Filter(#[from] FilterError),
    #[error("connection closed")]
    ConnectionClosed,
    #[error("invalid client config: {0}")]
    InvalidConfig(String),
    #[error("transport error: {0}")]
    Transport(SfmError),
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

/// Connection retries: one initial attempt, then `attempts` more after waits of
/// `initial_backoff`, doubling each time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconnectPolicy {
    pub attempts: u32,
    pub initial_backoff_secs: f64,
}

impl Default for ReconnectPolicy {
    fn default() -> Self {
        ReconnectPolicy {
            attempts: 3,
            initial_backoff_secs: 1.0,
        }
    }
}

impl ReconnectPolicy {
    pub fn none() -> Self {
        ReconnectPolicy {
            attempts: 0,
            initial_backoff_secs: 0.0,
        }
    }

    pub fn backoffs(&self) -> impl Iterator<Item = Duration> {
        let first = self.initial_backoff_secs.max(0.0);
        (0..self.attempts).map(move |i| Duration::from_secs_f64(first * 2f64.powi(i as i32)))
    }
}

fn default_driver() -> String {
    "tcp".into()
}

fn default_heartbeat() -> Option<f64> {
    Some(5.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub name: String,
    pub server_address: String,
    #[serde(default = "default_driver")]
    pub driver: String,
    /// Heartbeat interval; the connection is dropped after two silent intervals.
    #[serde(default = "default_heartbeat")]
    pub heartbeat_secs: Option<f64>,
    #[serde(default)]
    pub filters: Vec<FilterSpec>,
    #[serde(default)]
    pub reconnect: ReconnectPolicy,
    #[serde(default)]
    pub chunk_size: Option<u64>,
    /// Where inbound file bodies spill; system temp dir by default.
    #[serde(default)]
    pub spill_dir: Option<std::path::PathBuf>,
}

impl ClientConfig {
    pub fn new(name: &str, driver: &str, server_address: &str) -> Self {
        ClientConfig {
            name: name.to_owned(),
            server_address: server_address.to_owned(),
            driver: driver.to_owned(),
            heartbeat_secs: default_heartbeat(),
            filters: Vec::new(),
            reconnect: ReconnectPolicy::default(),
            chunk_size: None,
            spill_dir: None,
        }
    }

    fn sfm(&self) -> Result<SfmConfig> {
        let mut cfg = SfmConfig {
            spill_dir: self.spill_dir.clone(),
            ..SfmConfig::default()
        };
        if let Some(c) = self.chunk_size {
            let chunk = ChunkSize::new(c).map_err(|e| ClientError::InvalidConfig(e.to_string()))?;
            cfg = cfg.with_chunk_size(chunk);
        }
        if let Some(h) = self.heartbeat_secs {
            if !(h.is_finite() && h > 0.0) {
                return Err(ClientError::InvalidConfig(format!("heartbeat_secs {h}")));
            }
            cfg = cfg.with_heartbeat(Duration::from_secs_f64(h));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Running,
    Stopped,
}

#[derive(Debug, Clone)]
struct PendingTask {
    task_id: u64,
    task_name: String,
    round: u32,
    total_rounds: u32,
}

/// What `receive` produced.
#[derive(Debug)]
pub enum Incoming {
    Task { model: FLModel, task_name: String },
    /// The server ended the job (or the connection is gone for good).
    JobEnded,
}

pub struct ClientContext {
    config: ClientConfig,
    sfm: SfmConfig,
    endpoint: Option<Arc<Endpoint>>,
    /// Counters of connections already closed.
    past_stats: EndpointStats,
    state: JobState,
    pending: Option<PendingTask>,
    job_id: String,
    round: u32,
    total_rounds: u32,
}

impl ClientContext {
    /// Connects (retrying per the reconnect policy) and registers `config.name`.
    pub fn init(config: ClientConfig) -> Result<Self> {
        if config.name.is_empty() || config.name.contains(['\n', '=']) {
            return Err(ClientError::InvalidConfig(format!("bad client name {:?}", config.name)));
        }
        validate_chain(&config.filters)?;
        let sfm = config.sfm()?;
        let mut ctx = ClientContext {
            config,
            sfm,
            endpoint: None,
            past_stats: EndpointStats::default(),
            state: JobState::Stopped,
            pending: None,
            job_id: String::new(),
            round: 0,
            total_rounds: 0,
        };
        ctx.connect_with_retry(false)?;
        ctx.state = JobState::Running;
        Ok(ctx)
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn is_running(&self) -> bool {
        self.state == JobState::Running
    }

    pub fn state(&self) -> JobState {
        self.state
    }

    pub fn system_info(&self) -> BTreeMap<String, String> {
        let mut info = BTreeMap::new();
        info.insert("job_id".into(), self.job_id.clone());
        info.insert("client_name".into(), self.config.name.clone());
        info.insert("round".into(), self.round.to_string());
        info.insert("total_rounds".into(), self.total_rounds.to_string());
        info
    }

    /// Transport counters over every connection this client has made.
    pub fn transport_stats(&self) -> EndpointStats {
        let mut total = self.past_stats;
        if let Some(ep) = &self.endpoint {
            total.accumulate(&ep.stats());
        }
        total
    }

    fn retire_endpoint(&mut self) {
        if let Some(ep) = self.endpoint.take() {
            ep.close();
            self.past_stats.accumulate(&ep.stats());
        }
    }

    fn connect_once(&self) -> Result<(Arc<Endpoint>, String)> {
        let driver = driver_for(&self.config.driver).map_err(ClientError::Transport)?;
        let conn = driver
            .connect(&self.config.server_address)
            .map_err(|e| ClientError::ConnectionRefused(format!("{}: {e}", self.config.server_address)))?;
        let endpoint = Arc::new(Endpoint::new(conn, Role::Initiator, self.sfm.clone()));
        let hello = Message::blob(TOPIC_REGISTER, Vec::new()).with_header(HDR_CLIENT_NAME, self.config.name.as_str());
        endpoint.send_message(hello).map_err(ClientError::Transport)?;
        let reply = endpoint
            .recv_message(Some(Duration::from_secs(30)))
            .map_err(ClientError::Transport)?;
        if reply.topic != TOPIC_REGISTER_REPLY {
            return Err(ClientError::Rejected(format!("unexpected reply topic {}", reply.topic)));
        }
        match reply.header(HDR_STATUS) {
            Some(REGISTER_OK) => {}
            Some(REGISTER_DUPLICATE) => return Err(ClientError::DuplicateName(self.config.name.clone())),
            other => return Err(ClientError::Rejected(format!("status {other:?}"))),
        }
        let job_id = reply.header(HDR_JOB_ID).unwrap_or_default().to_owned();
        Ok((endpoint, job_id))
    }

    /// On reconnect a duplicate-name reply is retried: the server may not have noticed the
    /// old connection dropping yet.
    fn connect_with_retry(&mut self, reconnecting: bool) -> Result<()> {
        let mut waits = self.config.reconnect.backoffs();
        loop {
            let err = match self.connect_once() {
                Ok((endpoint, job_id)) => {
                    info!(client = %self.config.name, job = %job_id, "registered");
                    self.endpoint = Some(endpoint);
                    self.job_id = job_id;
                    return Ok(());
                }
                Err(e @ ClientError::DuplicateName(_)) if !reconnecting => return Err(e),
                Err(e) => e,
            };
            match waits.next() {
                Some(wait) => {
                    debug!(client = %self.config.name, error = %err, ?wait, "connect failed, retrying");
                    thread::sleep(wait);
                }
                None => return Err(err),
            }
        }
    }

    fn stop(&mut self) {
        self.state = JobState::Stopped;
        self.pending = None;
        self.retire_endpoint();
    }

    /// After a lost connection: reconnect per policy or stop.
    fn recover(&mut self) -> bool {
        self.pending = None;
        self.retire_endpoint();
        warn!(client = %self.config.name, "connection lost, reconnecting");
        match self.connect_with_retry(true) {
            Ok(()) => true,
            Err(e) => {
                warn!(client = %self.config.name, error = %e, "giving up");
                self.stop();
                false
            }
        }
    }

    /// Blocks for the next task. Payloads that fail to decode are answered with a FAILED
    /// result and reported as [`ClientError::Decode`].
    pub fn receive(&mut self) -> Result<Incoming> {
        if self.state != JobState::Running {
            return Err(ClientError::NotRunning);
        }
        if self.pending.is_some() {
            return Err(ClientError::TaskPending);
        }
        loop {
            let endpoint = self.endpoint.clone().ok_or(ClientError::NotRunning)?;
            let msg = match endpoint.recv_message(None) {
                Ok(m) => m,
                Err(e) if endpoint.is_closed() || e.is_fatal() || matches!(e, SfmError::Timeout) => {
                    if self.recover() {
                        continue;
                    }
                    return Ok(Incoming::JobEnded);
                }
                Err(e) => return Err(ClientError::Transport(e)),
            };
            match msg.topic.as_str() {
                TOPIC_JOB_END => {
                    info!(client = %self.config.name, "job ended");
                    self.stop();
                    return Ok(Incoming::JobEnded);
                }
                TOPIC_TASK => return self.accept_task(msg),
                other => debug!(topic = other, "ignoring message"),
            }
        }
    }

    fn accept_task(&mut self, msg: Message) -> Result<Incoming> {
        let num = |key: &str| msg.header(key).and_then(|v| v.parse::<u64>().ok());
        let task = PendingTask {
            task_id: num(HDR_TASK_ID).unwrap_or(0),
            task_name: msg.header(HDR_TASK_NAME).unwrap_or(TASK_TRAIN).to_owned(),
            round: num(HDR_ROUND).unwrap_or(0) as u32,
            total_rounds: num(HDR_TOTAL_ROUNDS).unwrap_or(0) as u32,
        };
        if let Some(job) = msg.header(HDR_JOB_ID) {
            self.job_id = job.to_owned();
        }
        self.round = task.round;
        self.total_rounds = task.total_rounds;
        let decoded = msg
            .into_bytes()
            .map_err(ModelError::Io)
            .and_then(|b| decode_model(&b));
        let model = match decoded {
            Ok(m) => m,
            Err(e) => {
                warn!(client = %self.config.name, error = %e, "undecodable task payload");
                self.pending = Some(task);
                self.send_failure(&format!("decode error: {e}"))?;
                return Err(ClientError::Decode(e));
            }
        };
        let model = apply_chain(&model, &self.config.filters, Direction::TaskData)?;
        let task_name = task.task_name.clone();
        self.pending = Some(task);
        Ok(Incoming::Task { model, task_name })
    }

    fn send_result(&mut self, status: TaskStatus, body: Vec<u8>, reason: Option<&str>) -> Result<()> {
        if self.state != JobState::Running {
            return Err(ClientError::NotRunning);
        }
        let task = self.pending.take().ok_or(ClientError::NoPendingTask)?;
        let endpoint = self.endpoint.clone().ok_or(ClientError::ConnectionClosed)?;
        let mut msg = Message::object(TOPIC_RESULT, body)
            .with_header(HDR_TASK_ID, task.task_id.to_string())
            .with_header(HDR_CLIENT_NAME, self.config.name.as_str())
            .with_header(HDR_STATUS, status.as_str());
        if let Some(r) = reason {
            msg = msg.with_header(HDR_REASON, r.replace('\n', " "));
        }
        debug!(client = %self.config.name, task = task.task_id, name = %task.task_name, ?status, "sending result");
        endpoint.send_message(msg).map(|_| ()).map_err(|e| {
            if e.is_fatal() {
                ClientError::ConnectionClosed
            } else {
                ClientError::Transport(e)
            }
        })
    }

    /// Sends `model` as the OK result of the pending task, after outbound filters.
    pub fn send(&mut self, model: &FLModel) -> Result<()> {
        if self.pending.is_none() {
            return Err(ClientError::NoPendingTask);
        }
        let filtered = apply_chain(model, &self.config.filters, Direction::TaskResult)?;
        let body = encode_model(&filtered)?;
        self.send_result(TaskStatus::Ok, body, None)
    }

    /// Reports the pending task as FAILED.
    pub fn send_failure(&mut self, reason: &str) -> Result<()> {
        self.send_result(TaskStatus::Failed, Vec::new(), Some(reason))
    }

    /// Drops the connection without ending the job on the server side.
    pub fn close(&mut self) {
        self.stop();
    }
}

impl Drop for ClientContext {
    fn drop(&mut self) {
        if let Some(ep) = self.endpoint.take() {
            ep.close();
        }
    }
}

pub type TrainerError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub params: ParamMap,
    pub num_samples: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ValidateOutput {
    pub metrics: BTreeMap<String, f64>,
    pub num_samples: u64,
}

/// Local computation plugged into [`run_client_loop`]. `train` must return parameters with
/// the input's names, shapes and dtypes.
pub trait Trainer: Send {
    fn train(&mut self, params: &ParamMap, round: u32) -> Result<TrainOutput, TrainerError>;
    fn validate(&mut self, params: &ParamMap) -> Result<ValidateOutput, TrainerError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoopSummary {
    pub trained: u32,
    pub validated: u32,
    pub failed: u32,
}

/// `receive → train or validate → send` until the job ends. Trainer errors are reported
/// as FAILED results and the loop moves on to the next task.
pub fn run_client_loop(ctx: &mut ClientContext, trainer: &mut dyn Trainer) -> Result<LoopSummary> {
    let mut summary = LoopSummary::default();
    while ctx.is_running() {
        let (model, task_name) = match ctx.receive() {
            Ok(Incoming::Task { model, task_name }) => (model, task_name),
            Ok(Incoming::JobEnded) => break,
            Err(ClientError::Decode(_)) | Err(ClientError::Transport(_)) => {
                summary.failed += 1;
                continue;
            }
            Err(ClientError::NotRunning) => break,
            Err(e) => return Err(e),
        };
        let outcome = match task_name.as_str() {
            TASK_VALIDATE => trainer.validate(&model.params).map(|v| {
                summary.validated += 1;
                let mut m = FLModel::metrics_only(v.metrics, v.num_samples);
                m.current_round = model.current_round;
                m.total_rounds = model.total_rounds;
                m
            }),
            TASK_TRAIN => trainer.train(&model.params, model.current_round).map(|t| {
                summary.trained += 1;
                FLModel {
                    params: t.params,
                    metrics: t.metrics,
                    meta: BTreeMap::new(),
                    current_round: model.current_round,
                    total_rounds: model.total_rounds,
                    num_samples: t.num_samples,
                }
            }),
            other => Err(format!("unknown task {other:?}").into()),
        };
        let sent = match outcome {
            Ok(result) => ctx.send(&result),
            Err(e) => {
                warn!(client = %ctx.name(), task = %task_name, error = %e, "task failed");
                summary.failed += 1;
                ctx.send_failure(&e.to_string())
            }
        };
        match sent {
            Ok(()) => {}
            Err(ClientError::ConnectionClosed) | Err(ClientError::Transport(_)) => {
                debug!(client = %ctx.name(), "result not delivered");
            }
            Err(ClientError::NotRunning) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}

/// [`Trainer`] over a local dataset with one of the reference models.
#[derive(Debug, Clone)]
pub struct LocalTrainer {
    pub arch: Arch,
    pub train_set: LabeledDataset,
    pub val_set: LabeledDataset,
    pub config: TrainConfig,
}

impl LocalTrainer {
    pub fn new(arch: Arch, train_set: LabeledDataset, val_set: LabeledDataset, config: TrainConfig) -> Self {
        LocalTrainer {
            arch,
            train_set,
            val_set,
            config,
        }
    }
}

impl Trainer for LocalTrainer {
    fn train(&mut self, params: &ParamMap, round: u32) -> Result<TrainOutput, TrainerError> {
        let config = TrainConfig {
            seed: self.config.seed.wrapping_add(u64::from(round) << 32),
            ..self.config.clone()
        };
        let params = data::train(&self.arch, params, &self.train_set, &config)?;
        let metrics = data::evaluate(&self.arch, &params, &self.train_set)?;
        Ok(TrainOutput {
            params,
            num_samples: self.train_set.len() as u64,
            metrics,
        })
    }

    fn validate(&mut self, params: &ParamMap) -> Result<ValidateOutput, TrainerError> {
        Ok(ValidateOutput {
            metrics: data::evaluate(&self.arch, params, &self.val_set)?,
            num_samples: self.val_set.len() as u64,
        })
    }
}
