use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::json;

use super::aggregate::weighted_metric;
use super::checkpoint::{checkpoint_name, write_marker};
use super::{
    aggregate_weighted, save_model, ClientState, Communicator, EventLog, JobConfig,
    ModelSelector, Result, ServerError, TaskResult, Workflow, BEST_MARKER,
};
use crate::filters::{apply_chain, Direction, FilterSpec};
use crate::model::{model_linear_update, FLModel, ModelError};
use crate::protocol::{TaskStatus, TASK_TRAIN, TASK_VALIDATE};

/// Picks `k` of `available` uniformly without replacement, sorted by name.
///
/// The generator is ChaCha20 seeded with `seed` on stream `round`, so every round draws
/// independently and reruns repeat exactly.
pub fn sample_clients(available: &[String], k: u32, seed: u64, round: u32) -> Result<Vec<String>> {
    if available.len() < k as usize {
        return Err(ServerError::NotEnoughClients {
            needed: k,
            available: available.len() as u32,
        });
    }
    let mut names = available.to_vec();
    names.sort();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    let mut picked: Vec<String> = rand::seq::index::sample(&mut rng, names.len(), k as usize)
        .into_iter()
        .map(|i| names[i].clone())
        .collect();
    picked.sort();
    Ok(picked)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientReport {
    pub name: String,
    pub status: TaskStatus,
    pub num_samples: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ClientReport {
    fn from_result(r: &TaskResult) -> Self {
        ClientReport {
            name: r.client_name.clone(),
            status: r.status,
            num_samples: r.payload.as_ref().map_or(0, |m| m.num_samples),
            metrics: r.payload.as_ref().map(|m| m.metrics.clone()).unwrap_or_default(),
            reason: r.reason.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Clients in the order they trained (sorted by name for FedAvg).
    pub clients: Vec<ClientReport>,
    /// Sample-weighted means of the clients' training metrics.
    pub train_metrics: BTreeMap<String, f64>,
    pub validation: Vec<ClientReport>,
    pub validation_metric: Option<f64>,
    /// Server-side evaluation of the new global model.
    pub global_metrics: BTreeMap<String, f64>,
    pub checkpoint: String,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub wall_ms: u64,
}

type Evaluator = Box<dyn FnMut(&FLModel) -> BTreeMap<String, f64> + Send>;

/// Runs one job's workflow on top of a [`Communicator`].
pub struct Controller {
    comm: Arc<Communicator>,
    config: JobConfig,
    filters: Vec<FilterSpec>,
    events: Arc<EventLog>,
    evaluator: Option<Evaluator>,
    selector: Option<ModelSelector>,
    history: Vec<RoundRecord>,
}

impl Controller {
    pub fn new(comm: Arc<Communicator>, config: JobConfig) -> Self {
        let selector = config.selection_metric.clone().map(ModelSelector::new);
        Controller {
            comm,
            config,
            filters: Vec::new(),
            events: Arc::new(EventLog::disabled()),
            evaluator: None,
            selector,
            history: Vec::new(),
        }
    }

    /// Filters applied to outbound task data and inbound results.
    pub fn with_filters(mut self, filters: Vec<FilterSpec>) -> Self {
        self.filters = filters;
        self
    }

    pub fn with_events(mut self, events: Arc<EventLog>) -> Self {
        self.events = events;
        self
    }

    /// Scores every new global model on the server side.
    pub fn with_evaluator(mut self, f: impl FnMut(&FLModel) -> BTreeMap<String, f64> + Send + 'static) -> Self {
        self.evaluator = Some(Box::new(f));
        self
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    /// Best round and its metric, when a selection metric is configured.
    pub fn best(&self) -> Option<(u32, f64)> {
        self.selector.as_ref().and_then(ModelSelector::best)
    }

    pub fn run(&mut self, initial: FLModel) -> Result<FLModel> {
        let outcome = self.config.validate().and_then(|_| match self.config.workflow {
            Workflow::Fedavg => self.run_fedavg_inner(initial),
            Workflow::Cyclic => self.run_cyclic_inner(initial),
        });
        match &outcome {
            Ok(m) => self.events.emit(
                "job_end",
                json!({"status": "completed", "rounds": self.history.len(), "final_round": m.current_round}),
            ),
            Err(e) => self.events.emit(
                "error",
                json!({"status": "aborted", "rounds": self.history.len(), "error": e.to_string()}),
            ),
        }
        outcome
    }

    /// The FedAvg loop: sample, scatter/gather, aggregate, update, save.
    pub fn run_fedavg(&mut self, initial: FLModel) -> Result<FLModel> {
        self.config.workflow = Workflow::Fedavg;
        self.run(initial)
    }

    /// Cyclic weight transfer: the model visits clients one after another each round.
    pub fn run_cyclic(&mut self, initial: FLModel) -> Result<FLModel> {
        self.config.workflow = Workflow::Cyclic;
        self.run(initial)
    }

    fn start_job(&self, initial: FLModel) -> Result<FLModel> {
        std::fs::create_dir_all(&self.config.checkpoint_dir)?;
        let model = initial.with_rounds(0, self.config.num_rounds);
        self.events.emit(
            "job_start",
            json!({
                "job_id": self.config.job_id,
                "workflow": self.config.workflow,
                "num_rounds": self.config.num_rounds,
                "min_clients": self.config.min_clients,
                "min_responses": self.config.min_responses(),
            }),
        );
        Ok(model)
    }

    fn filtered(&self, model: &FLModel, direction: Direction) -> Result<FLModel> {
        Ok(apply_chain(model, &self.filters, direction)?)
    }

    fn filter_results(&self, results: &mut [TaskResult]) -> Result<()> {
        for r in results.iter_mut() {
            if let Some(m) = r.payload.as_mut() {
                *m = apply_chain(m, &self.filters, Direction::TaskResult)?;
            }
        }
        Ok(())
    }

    fn log_results(&self, round: u32, task: &str, results: &[TaskResult]) {
        for r in results {
            self.events.emit(
                "client_result",
                json!({
                    "round": round,
                    "task": task,
                    "client": r.client_name,
                    "status": r.status,
                    "num_samples": r.payload.as_ref().map_or(0, |m| m.num_samples),
                    "metrics": r.payload.as_ref().map(|m| m.metrics.clone()).unwrap_or_default(),
                    "reason": r.reason,
                }),
            );
        }
    }

    fn run_fedavg_inner(&mut self, initial: FLModel) -> Result<FLModel> {
        let cfg = self.config.clone();
        let mut global = self.start_job(initial)?;
        for round in 0..cfg.num_rounds {
            let started = Instant::now();
            let before = self.comm.total_stats();
            let available = self.comm.wait_for_clients(cfg.min_clients, cfg.registration_timeout)?;
            let targets = sample_clients(&available, cfg.min_clients, cfg.seed, round)?;
            self.events.emit("round_start", json!({"round": round, "targets": targets}));

            let task = self.filtered(&global.clone().with_rounds(round, cfg.num_rounds), Direction::TaskData)?;
            let mut results = self.comm.gather(
                &targets,
                TASK_TRAIN,
                round,
                &task,
                cfg.min_responses(),
                cfg.task_timeout,
            )?;
            self.log_results(round, TASK_TRAIN, &results);
            let ok = results.iter().filter(|r| r.is_ok()).count() as u32;
            if ok < cfg.min_responses() {
                return Err(ServerError::InsufficientResponses {
                    ok,
                    needed: cfg.min_responses(),
                });
            }
            if (ok as usize) < targets.len() {
                tracing::warn!(round, ok, targets = targets.len(), "aggregating without every target");
            }
            self.filter_results(&mut results)?;
            let aggregate = aggregate_weighted(&results, cfg.weighting)?;
            let mut next = model_linear_update(&global, &aggregate)?;
            next.total_rounds = cfg.num_rounds;
            next.metrics = train_metrics(&results);
            next.num_samples = results
                .iter()
                .filter_map(|r| r.payload.as_ref())
                .map(|m| m.num_samples)
                .sum();
            global = next;

            let clients = results.iter().map(ClientReport::from_result).collect();
            self.finish_round(round, &global, &targets, clients, started, before)?;
        }
        Ok(global)
    }

    fn run_cyclic_inner(&mut self, initial: FLModel) -> Result<FLModel> {
        let cfg = self.config.clone();
        let mut model = self.start_job(initial)?;
        for round in 0..cfg.num_rounds {
            let started = Instant::now();
            let before = self.comm.total_stats();
            let available = self.comm.wait_for_clients(cfg.min_clients, cfg.registration_timeout)?;
            let order = if cfg.cyclic_order.is_empty() {
                available
            } else {
                cfg.cyclic_order.clone()
            };
            self.events.emit("round_start", json!({"round": round, "order": order}));

            let mut clients = Vec::new();
            let mut metrics = BTreeMap::new();
            let mut samples = 0;
            for name in &order {
                if self.comm.client_state(name).is_none_or(|s| s == ClientState::Lost) {
                    return Err(ServerError::ClientLost(name.clone()));
                }
                let task = self.filtered(&model.clone().with_rounds(round, cfg.num_rounds), Direction::TaskData)?;
                let mut results = self.comm.gather(
                    std::slice::from_ref(name),
                    TASK_TRAIN,
                    round,
                    &task,
                    1,
                    cfg.task_timeout,
                )?;
                self.log_results(round, TASK_TRAIN, &results);
                self.filter_results(&mut results)?;
                let result = results.pop().ok_or_else(|| ServerError::ClientLost(name.clone()))?;
                clients.push(ClientReport::from_result(&result));
                let Some(trained) = result.payload.filter(|_| result.status == TaskStatus::Ok) else {
                    if self.comm.client_state(name) == Some(ClientState::Lost) {
                        return Err(ServerError::ClientLost(name.clone()));
                    }
                    return Err(ServerError::TaskFailed {
                        client: name.clone(),
                        reason: result.reason.unwrap_or_default(),
                    });
                };
                for (key, t) in trained.params {
                    let slot = model
                        .params
                        .get_mut(&key)
                        .ok_or_else(|| ModelError::KeyMismatch(key.clone()))?;
                    if !slot.same_layout(&t) {
                        return Err(ModelError::ShapeMismatch(key).into());
                    }
                    *slot = t;
                }
                metrics = trained.metrics;
                samples = trained.num_samples;
            }
            model.current_round = round + 1;
            model.total_rounds = cfg.num_rounds;
            model.metrics = metrics;
            model.num_samples = samples;
            self.finish_round(round, &model, &order, clients, started, before)?;
        }
        Ok(model)
    }

    /// Checkpoint, optional validation and server-side evaluation, then the round record.
    fn finish_round(
        &mut self,
        round: u32,
        model: &FLModel,
        participants: &[String],
        clients: Vec<ClientReport>,
        started: Instant,
        before: crate::sfm::EndpointStats,
    ) -> Result<()> {
        let path = save_model(model, &self.config.checkpoint_dir, round)?;
        let checkpoint = checkpoint_name(round);
        self.events.emit("checkpoint", json!({"round": round, "path": path}));

        let mut validation = Vec::new();
        let mut validation_metric = None;
        if let Some(metric) = self.selector.as_ref().map(|s| s.metric().to_owned()) {
            let task = self.filtered(model, Direction::TaskData)?;
            let mut results = self.comm.gather(
                participants,
                TASK_VALIDATE,
                round,
                &task,
                participants.len() as u32,
                self.config.task_timeout,
            )?;
            self.log_results(round, TASK_VALIDATE, &results);
            self.filter_results(&mut results)?;
            validation_metric = weighted_metric(&results, &metric);
            let selector = self.selector.as_mut().expect("selector present");
            if selector.record(round, &results) {
                write_marker(&self.config.checkpoint_dir, BEST_MARKER, &checkpoint)?;
            }
            validation = results.iter().map(ClientReport::from_result).collect();
        }

        let global_metrics = match self.evaluator.as_mut() {
            Some(f) => f(model),
            None => BTreeMap::new(),
        };
        let after = self.comm.total_stats();
        let record = RoundRecord {
            round,
            train_metrics: model.metrics.clone(),
            clients,
            validation,
            validation_metric,
            global_metrics,
            checkpoint,
            bytes_sent: after.bytes_sent - before.bytes_sent,
            bytes_received: after.bytes_received - before.bytes_received,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        self.events.emit(
            "round_end",
            json!({
                "round": round,
                "train_metrics": record.train_metrics,
                "validation_metric": record.validation_metric,
                "global_metrics": record.global_metrics,
                "bytes_sent": record.bytes_sent,
                "bytes_received": record.bytes_received,
                "wall_ms": record.wall_ms,
                "best": self.best().map(|(r, v)| json!({"round": r, "metric": v})),
            }),
        );
        self.history.push(record);
        Ok(())
    }
}

/// Sample-weighted mean of every metric reported by OK results.
fn train_metrics(results: &[TaskResult]) -> BTreeMap<String, f64> {
    let keys: BTreeSet<&String> = results
        .iter()
        .filter_map(|r| r.payload.as_ref())
        .flat_map(|m| m.metrics.keys())
        .collect();
    keys.into_iter()
        .filter_map(|k| Some((k.clone(), weighted_metric(results, k)?)))
        .collect()
}
