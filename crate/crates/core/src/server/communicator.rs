use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::Serialize;
use tracing::{debug, info, warn};

use super::{Result, ServerError, TaskResult};
use crate::model::{decode_model, encode_model, FLModel};
use crate::protocol::*;
use crate::sfm::{Acceptor, Connection, Driver, Endpoint, EndpointStats, Message, Role, SfmConfig};

const NOT_CONNECTED: &str = "client not connected";
/// How long to wait for task acks of clients that already replied.
const SETTLE_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub sfm: SfmConfig,
    pub job_id: String,
    /// How long a new connection may take to send its `register` message.
    pub register_timeout: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            sfm: SfmConfig::default(),
            job_id: "job".into(),
            register_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClientState {
    Idle,
    Busy,
    Lost,
}

struct ClientRecord {
    endpoint: Arc<Endpoint>,
    state: ClientState,
    /// False until the registration reply has gone out.
    ready: bool,
    last_seen: Instant,
}

enum Event {
    Result(TaskResult),
    Lost(String),
    SendFailed {
        task_id: u64,
        client: String,
        reason: String,
    },
}

struct Shared {
    clients: Mutex<BTreeMap<String, ClientRecord>>,
    changed: Condvar,
    endpoints: Mutex<Vec<Arc<Endpoint>>>,
    handlers: Mutex<Vec<JoinHandle<()>>>,
    events: Sender<Event>,
    options: ServerOptions,
    closed: AtomicBool,
    /// Set once the job-end notice has gone out; disconnects are expected after that.
    ending: AtomicBool,
}

/// Accepts client connections, keeps the registry and brokers tasks and results.
///
/// Each connection is served by its own thread; results reach the controller through a
/// single queue.
pub struct Communicator {
    shared: Arc<Shared>,
    events: Receiver<Event>,
    acceptor: Arc<dyn Acceptor>,
    accept_thread: Mutex<Option<JoinHandle<()>>>,
    next_task: AtomicU64,
    address: String,
}

impl Communicator {
    pub fn start(driver: &dyn Driver, address: &str, options: ServerOptions) -> Result<Self> {
        let acceptor: Arc<dyn Acceptor> = Arc::from(driver.listen(address)?);
        let (tx, rx) = unbounded();
        let shared = Arc::new(Shared {
            clients: Mutex::new(BTreeMap::new()),
            changed: Condvar::new(),
            endpoints: Mutex::new(Vec::new()),
            handlers: Mutex::new(Vec::new()),
            events: tx,
            options,
            closed: AtomicBool::new(false),
            ending: AtomicBool::new(false),
        });
        let s = shared.clone();
        let a = acceptor.clone();
        let accept_thread = thread::Builder::new()
            .name("server-accept".into())
            .spawn(move || {
                while let Ok(conn) = a.accept() {
                    if s.closed.load(Ordering::Acquire) {
                        break;
                    }
                    let s2 = s.clone();
                    let h = thread::Builder::new()
                        .name("server-conn".into())
                        .spawn(move || serve_connection(s2, conn))
                        .expect("spawn connection handler");
                    s.handlers.lock().unwrap().push(h);
                }
            })
            .expect("spawn accept loop");
        let address = acceptor.local_address();
        Ok(Communicator {
            shared,
            events: rx,
            acceptor,
            accept_thread: Mutex::new(Some(accept_thread)),
            next_task: AtomicU64::new(1),
            address,
        })
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn job_id(&self) -> &str {
        &self.shared.options.job_id
    }

    /// Registered clients that are not lost, sorted by name.
    pub fn available_clients(&self) -> Vec<String> {
        available(&self.shared.clients.lock().unwrap())
    }

    pub fn client_state(&self, name: &str) -> Option<ClientState> {
        self.shared.clients.lock().unwrap().get(name).map(|c| c.state)
    }

    /// Name, state and time since the client was last heard from (any frame, heartbeats
    /// included).
    pub fn clients(&self) -> Vec<(String, ClientState, Duration)> {
        self.shared
            .clients
            .lock()
            .unwrap()
            .iter()
            .map(|(name, c)| {
                let idle = c.endpoint.idle_for().min(c.last_seen.elapsed());
                (name.clone(), c.state, idle)
            })
            .collect()
    }

    /// Blocks until at least `n` clients are available.
    pub fn wait_for_clients(&self, n: u32, timeout: Duration) -> Result<Vec<String>> {
        let deadline = Instant::now() + timeout;
        let mut clients = self.shared.clients.lock().unwrap();
        loop {
            if self.shared.closed.load(Ordering::Acquire) {
                return Err(ServerError::ShutDown);
            }
            let names = available(&clients);
            if names.len() >= n as usize {
                return Ok(names);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(ServerError::NotEnoughClients {
                    needed: n,
                    available: names.len() as u32,
                });
            }
            clients = self.shared.changed.wait_timeout(clients, deadline - now).unwrap().0;
        }
    }

    /// Transport counters summed over every connection this server has had.
    pub fn total_stats(&self) -> EndpointStats {
        let mut total = EndpointStats::default();
        for ep in self.shared.endpoints.lock().unwrap().iter() {
            total.accumulate(&ep.stats());
        }
        total
    }

    /// Sends `task_name` with `model` to every target and collects replies until
    /// `min_responses` OK results are in, every target has answered, the quorum can no longer
    /// be reached, or `timeout` passes. Results are sorted by client name; targets still
    /// silent at the deadline appear as TIMEOUT. Results for earlier tasks are discarded.
    pub fn broadcast_and_wait(
        &self,
        targets: &[String],
        task_name: &str,
        round: u32,
        model: &FLModel,
        min_responses: u32,
        timeout: Duration,
    ) -> Result<Vec<TaskResult>> {
        let results = self.gather(targets, task_name, round, model, min_responses, timeout)?;
        let ok = results.iter().filter(|r| r.is_ok()).count() as u32;
        if ok < min_responses {
            return Err(ServerError::InsufficientResponses {
                ok,
                needed: min_responses,
            });
        }
        Ok(results)
    }

    /// As [`Self::broadcast_and_wait`] without the quorum check.
    pub fn gather(
        &self,
        targets: &[String],
        task_name: &str,
        round: u32,
        model: &FLModel,
        min_responses: u32,
        timeout: Duration,
    ) -> Result<Vec<TaskResult>> {
        if targets.is_empty() {
            return Err(ServerError::NoTargets);
        }
        if self.shared.closed.load(Ordering::Acquire) {
            return Err(ServerError::ShutDown);
        }
        let task_id = self.next_task.fetch_add(1, Ordering::Relaxed);
        let body = Arc::new(encode_model(model)?);
        let deadline = Instant::now() + timeout;
        let mut replies: HashMap<String, TaskResult> = HashMap::new();
        let (delivered_tx, delivered_rx) = unbounded::<String>();

        for name in targets {
            let endpoint = {
                let mut clients = self.shared.clients.lock().unwrap();
                match clients.get_mut(name) {
                    Some(c) if c.state != ClientState::Lost && c.ready => {
                        c.state = ClientState::Busy;
                        Some(c.endpoint.clone())
                    }
                    _ => None,
                }
            };
            let Some(endpoint) = endpoint else {
                replies.insert(
                    name.clone(),
                    TaskResult::failed(task_id, name, TaskStatus::Failed, NOT_CONNECTED),
                );
                continue;
            };
            let msg = shared_object(TOPIC_TASK, &body)
                .with_header(HDR_TASK_ID, task_id.to_string())
                .with_header(HDR_TASK_NAME, task_name)
                .with_header(HDR_ROUND, round.to_string())
                .with_header(HDR_TOTAL_ROUNDS, model.total_rounds.to_string())
                .with_header(HDR_JOB_ID, self.job_id());
            let events = self.shared.events.clone();
            let delivered = delivered_tx.clone();
            let client = name.clone();
            // sends run detached so a stuck peer cannot hold up the round
            thread::Builder::new()
                .name("server-send".into())
                .spawn(move || match endpoint.send_message(msg) {
                    Ok(_) => {
                        let _ = delivered.send(client);
                    }
                    Err(e) => {
                        let _ = events.send(Event::SendFailed {
                            task_id,
                            client,
                            reason: e.to_string(),
                        });
                    }
                })
                .expect("spawn sender");
        }

        loop {
            let ok = replies.values().filter(|r| r.is_ok()).count();
            let outstanding = targets.len() - replies.len();
            if ok >= min_responses as usize || outstanding == 0 || ok + outstanding < min_responses as usize {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                for name in targets {
                    replies.entry(name.clone()).or_insert_with(|| {
                        TaskResult::failed(task_id, name, TaskStatus::Timeout, "no reply before deadline")
                    });
                }
                break;
            }
            let event = match self.events.recv_timeout(deadline - now) {
                Ok(e) => e,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => break,
            };
            let (client, result) = match event {
                Event::Result(r) if r.task_id == task_id => (r.client_name.clone(), r),
                Event::Result(r) => {
                    debug!(task_id = r.task_id, client = %r.client_name, "discarding late result");
                    continue;
                }
                Event::SendFailed { task_id: t, client, reason } if t == task_id => {
                    let r = TaskResult::failed(task_id, &client, TaskStatus::Failed, reason);
                    (client, r)
                }
                Event::SendFailed { .. } => continue,
                Event::Lost(client) => {
                    if self.client_state(&client) != Some(ClientState::Lost) {
                        continue;
                    }
                    let r = TaskResult::failed(task_id, &client, TaskStatus::Failed, "connection lost");
                    (client, r)
                }
            };
            if targets.contains(&client) && !replies.contains_key(&client) {
                replies.insert(client, result);
            }
        }
        // Clients that answered have acknowledged the task too; wait for those acks so the
        // transport counters for this exchange are settled when we return.
        drop(delivered_tx);
        let mut unsettled: Vec<&String> = replies
            .values()
            .filter(|r| r.status != TaskStatus::Timeout && r.reason.as_deref() != Some(NOT_CONNECTED))
            .map(|r| &r.client_name)
            .collect();
        let settle_by = Instant::now() + SETTLE_GRACE;
        while !unsettled.is_empty() {
            match delivered_rx.recv_deadline(settle_by) {
                Ok(name) => unsettled.retain(|n| **n != name),
                Err(_) => break,
            }
        }
        let mut results: Vec<TaskResult> = replies.into_values().collect();
        results.sort_by(|a, b| a.client_name.cmp(&b.client_name));
        Ok(results)
    }

    /// Tells every connected client the job is over, waiting up to `grace` for delivery.
    pub fn end_job(&self, grace: Duration) {
        self.shared.ending.store(true, Ordering::Release);
        let endpoints: Vec<Arc<Endpoint>> = self
            .shared
            .clients
            .lock()
            .unwrap()
            .values()
            .filter(|c| c.state != ClientState::Lost)
            .map(|c| c.endpoint.clone())
            .collect();
        let (done_tx, done_rx) = unbounded();
        for ep in &endpoints {
            let ep = ep.clone();
            let done = done_tx.clone();
            let job_id = self.job_id().to_owned();
            thread::spawn(move || {
                let msg = Message::blob(TOPIC_JOB_END, Vec::new()).with_header(HDR_JOB_ID, job_id);
                let _ = ep.send_message(msg);
                let _ = done.send(());
            });
        }
        let deadline = Instant::now() + grace;
        for _ in &endpoints {
            let left = deadline.saturating_duration_since(Instant::now());
            if done_rx.recv_timeout(left).is_err() {
                warn!("not every client acknowledged job end");
                break;
            }
        }
    }

    /// Stops accepting, closes every connection and joins the service threads.
    pub fn shutdown(&self) {
        if self.shared.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        {
            let _clients = self.shared.clients.lock().unwrap();
            self.shared.changed.notify_all();
        }
        self.acceptor.close();
        if let Some(t) = self.accept_thread.lock().unwrap().take() {
            let _ = t.join();
        }
        let endpoints: Vec<Arc<Endpoint>> = self.shared.endpoints.lock().unwrap().clone();
        for ep in endpoints {
            ep.close();
        }
        let handlers: Vec<JoinHandle<()>> = self.shared.handlers.lock().unwrap().drain(..).collect();
        for h in handlers {
            let _ = h.join();
        }
    }
}

impl Drop for Communicator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn available(clients: &BTreeMap<String, ClientRecord>) -> Vec<String> {
    clients
        .iter()
        .filter(|(_, c)| c.ready && c.state != ClientState::Lost)
        .map(|(n, _)| n.clone())
        .collect()
}

fn serve_connection(shared: Arc<Shared>, conn: Connection) {
    let endpoint = Arc::new(Endpoint::new(conn, Role::Acceptor, shared.options.sfm.clone()));
    shared.endpoints.lock().unwrap().push(endpoint.clone());
    if shared.closed.load(Ordering::Acquire) {
        endpoint.close();
        return;
    }
    let Some(name) = register(&shared, &endpoint) else {
        endpoint.close();
        return;
    };
    info!(client = %name, "client registered");

    loop {
        let msg = match endpoint.recv_message(None) {
            Ok(m) => m,
            Err(e) if endpoint.is_closed() || e.is_fatal() => {
                debug!(client = %name, error = %e, "connection ended");
                break;
            }
            Err(e) => {
                warn!(client = %name, error = %e, "inbound stream failed");
                continue;
            }
        };
        if msg.topic != TOPIC_RESULT {
            warn!(client = %name, topic = %msg.topic, "unexpected message");
            continue;
        }
        let result = parse_result(&name, msg);
        if let Some(c) = shared.clients.lock().unwrap().get_mut(&name) {
            if Arc::ptr_eq(&c.endpoint, &endpoint) {
                c.state = ClientState::Idle;
                c.last_seen = Instant::now();
            }
        }
        let _ = shared.events.send(Event::Result(result));
    }

    let mut clients = shared.clients.lock().unwrap();
    if let Some(c) = clients.get_mut(&name) {
        if Arc::ptr_eq(&c.endpoint, &endpoint) {
            c.state = ClientState::Lost;
            drop(clients);
            shared.changed.notify_all();
            if shared.ending.load(Ordering::Acquire) {
                debug!(client = %name, "client disconnected after job end");
            } else {
                warn!(client = %name, "client lost");
            }
            let _ = shared.events.send(Event::Lost(name));
        }
    }
    endpoint.close();
}

/// Handles the registration handshake; `None` when the peer is rejected or silent.
fn register(shared: &Shared, endpoint: &Arc<Endpoint>) -> Option<String> {
    let msg = match endpoint.recv_message(Some(shared.options.register_timeout)) {
        Ok(m) => m,
        Err(e) => {
            debug!(error = %e, "no registration");
            return None;
        }
    };
    let name = match (msg.topic.as_str(), msg.header(HDR_CLIENT_NAME)) {
        (TOPIC_REGISTER, Some(n)) if !n.is_empty() => n.to_owned(),
        _ => {
            warn!(topic = %msg.topic, "first message was not a registration");
            return None;
        }
    };
    let accepted = {
        let mut clients = shared.clients.lock().unwrap();
        match clients.get(&name) {
            Some(c) if c.state != ClientState::Lost => false,
            _ => {
                clients.insert(
                    name.clone(),
                    ClientRecord {
                        endpoint: endpoint.clone(),
                        state: ClientState::Idle,
                        ready: false,
                        last_seen: Instant::now(),
                    },
                );
                true
            }
        }
    };
    let status = if accepted { REGISTER_OK } else { REGISTER_DUPLICATE };
    let reply = Message::blob(TOPIC_REGISTER_REPLY, Vec::new())
        .with_header(HDR_STATUS, status)
        .with_header(HDR_JOB_ID, shared.options.job_id.as_str());
    let sent = endpoint.send_message(reply);
    if !accepted {
        warn!(client = %name, "rejected duplicate client name");
        return None;
    }
    let mut clients = shared.clients.lock().unwrap();
    let record = clients.get_mut(&name).filter(|c| Arc::ptr_eq(&c.endpoint, endpoint))?;
    if sent.is_err() {
        record.state = ClientState::Lost;
        return None;
    }
    record.ready = true;
    drop(clients);
    shared.changed.notify_all();
    Some(name)
}

fn parse_result(client: &str, msg: Message) -> TaskResult {
    let task_id = msg
        .header(HDR_TASK_ID)
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    let status = msg
        .header(HDR_STATUS)
        .and_then(TaskStatus::parse)
        .unwrap_or(TaskStatus::Failed);
    if status != TaskStatus::Ok {
        let reason = msg.header(HDR_REASON).unwrap_or("unspecified").to_owned();
        return TaskResult::failed(task_id, client, status, reason);
    }
    let decoded = msg
        .into_bytes()
        .map_err(|e| e.to_string())
        .and_then(|b| decode_model(&b).map_err(|e| e.to_string()));
    match decoded {
        Ok(model) => TaskResult::ok(task_id, client, model),
        Err(e) => TaskResult::failed(task_id, client, TaskStatus::Failed, format!("undecodable result: {e}")),
    }
}
