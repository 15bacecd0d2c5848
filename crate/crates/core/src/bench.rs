//! Large-model streaming benchmark: the server sends a model of `keys × key_bytes` f32
//! arrays to each client, every client adds a constant to every element and sends it back,
//! and the server checks each reply against the expected array before the next round.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::info;

use crate::model::{
    param_entry_len, ContainerHeader, DType, ModelError, ModelReader, ModelWriter, FIXED_HEADER_LEN,
};
use crate::sfm::{
    driver_for, Body, ChunkSize, Endpoint, EndpointStats, FileBody, Message, Role, SfmConfig, SfmError,
};

const TOPIC_BENCH_TASK: &str = "bench-task";
const TOPIC_BENCH_RESULT: &str = "bench-result";
const TOPIC_BENCH_END: &str = "bench-end";
const HDR_ROUND: &str = "round";
/// Elements are streamed in blocks of this many bytes.
const BLOCK: usize = 1 << 20;
const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("payload of {size} bytes exceeds the {limit} byte guard")]
    GuardExceeded { size: u64, limit: u64 },
    #[error("invalid bench config: {0}")]
    Invalid(String),
    #[error("round {round}: reply from client {client} does not match the expected array")]
    Mismatch { round: u32, client: usize },
    #[error("transport error: {0}")]
    Transport(#[from] SfmError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("client {0} failed: {1}")]
    Client(usize, String),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    /// Models travel as in-memory byte bodies.
    Blob,
    /// Models are written to disk and streamed as file bodies.
    File,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_keys")]
    pub keys: usize,
    /// Bytes per key; a multiple of 4 (f32 elements).
    #[serde(default = "default_key_bytes")]
    pub key_bytes: u64,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_chunk")]
    pub chunk_size: u64,
    #[serde(default = "default_driver")]
    pub driver: String,
    #[serde(default = "default_mode")]
    pub mode: BenchMode,
    #[serde(default = "default_constant")]
    pub constant: f32,
    /// Refuse payloads above this size.
    #[serde(default = "default_guard")]
    pub max_payload_bytes: u64,
    /// Scratch space for file mode; the system temp dir by default.
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
}

fn default_keys() -> usize {
    64
}
fn default_key_bytes() -> u64 {
    4 << 20
}
fn default_rounds() -> u32 {
    3
}
fn default_clients() -> usize {
    2
}
fn default_chunk() -> u64 {
    ChunkSize::DEFAULT.get() as u64
}
fn default_driver() -> String {
    "inproc".into()
}
fn default_mode() -> BenchMode {
    BenchMode::Blob
}
fn default_constant() -> f32 {
    0.5
}
fn default_guard() -> u64 {
    1 << 30
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            keys: default_keys(),
            key_bytes: default_key_bytes(),
            rounds: default_rounds(),
            clients: default_clients(),
            chunk_size: default_chunk(),
            driver: default_driver(),
            mode: default_mode(),
            constant: default_constant(),
            max_payload_bytes: default_guard(),
            work_dir: None,
        }
    }
}

impl BenchConfig {
    /// Parameter bytes of the benchmark model.
    pub fn payload_bytes(&self) -> u64 {
        self.keys as u64 * self.key_bytes
    }

    pub fn validate(&self) -> Result<()> {
        if self.payload_bytes() > self.max_payload_bytes {
            return Err(BenchError::GuardExceeded {
                size: self.payload_bytes(),
                limit: self.max_payload_bytes,
            });
        }
        if !self.key_bytes.is_multiple_of(4) {
            return Err(BenchError::Invalid("key_bytes must be a multiple of 4".into()));
        }
        if self.keys > 0 && self.key_bytes == 0 {
            return Err(BenchError::Invalid("key_bytes must be > 0 when keys > 0".into()));
        }
        if self.rounds == 0 || self.clients == 0 {
            return Err(BenchError::Invalid("rounds and clients must be >= 1".into()));
        }
        if !(self.constant.is_finite() && self.constant != 0.0) {
            return Err(BenchError::Invalid("constant must be finite and non-zero".into()));
        }
        // values stay exact: pattern < 1024 plus rounds × constant well inside f32 precision
        if (self.constant.abs() as f64) * (self.rounds as f64) > 1e4 {
            return Err(BenchError::Invalid("constant × rounds must stay below 1e4".into()));
        }
        ChunkSize::new(self.chunk_size).map_err(|e| BenchError::Invalid(e.to_string()))?;
        driver_for(&self.driver).map_err(|e| BenchError::Invalid(e.to_string()))?;
        Ok(())
    }

    fn sfm(&self, spill: Option<PathBuf>) -> SfmConfig {
        let mut cfg = SfmConfig::default().with_chunk_size(ChunkSize::new(self.chunk_size).expect("validated"));
        cfg.spill_dir = spill;
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub payload_size: u64,
    /// Size of the encoded container on the wire.
    pub message_size: u64,
    pub chunk_size: u64,
    pub driver: String,
    pub mode: BenchMode,
    pub rounds: u32,
    pub clients: usize,
    /// Model bytes moved in both directions over total transfer time.
    pub throughput_mb_s: f64,
    /// Largest SFM stream buffer on any endpoint, per side.
    pub sender_peak_buffer: u64,
    pub receiver_peak_buffer: u64,
    pub round_secs: Vec<f64>,
    /// Rounds in which every reply matched the expected array.
    pub verified_rounds: u32,
    /// Server-side frames sent and received per round.
    pub frames_per_round: Vec<(u64, u64)>,
}

fn key_name(k: usize) -> String {
    format!("layer_{k:03}")
}

/// Element `i` of key `k` after `adds` additions of `c`.
fn element(k: usize, i: u64, adds: u32, c: f32) -> f32 {
    ((k as u64 * 7919 + i) % 1024) as f32 + adds as f32 * c
}

/// Writes the benchmark model whose elements have had `adds` additions of `c`.
pub fn write_expected<W: Write>(cfg: &BenchConfig, adds: u32, w: W) -> Result<u64> {
    let mut writer = ModelWriter::new(w);
    writer.write_header(&ContainerHeader {
        current_round: adds,
        total_rounds: cfg.rounds,
        num_samples: 0,
        param_count: cfg.keys as u32,
    })?;
    let elems = cfg.key_bytes / 4;
    let mut block = Vec::with_capacity(BLOCK);
    for k in 0..cfg.keys {
        writer.write_param_header(&key_name(k), DType::F32, &[elems])?;
        let mut i = 0;
        while i < elems {
            block.clear();
            let end = (i + (BLOCK / 4) as u64).min(elems);
            for j in i..end {
                block.extend_from_slice(&element(k, j, adds, cfg.constant).to_le_bytes());
            }
            writer.write_data(&block)?;
            i = end;
        }
    }
    writer.write_trailer(&Default::default(), &Default::default())?;
    Ok(writer.bytes_written())
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// SHA-256 of the expected container, computed without materializing it.
pub fn expected_digest(cfg: &BenchConfig, adds: u32) -> Result<[u8; 32]> {
    let mut h = HashWriter(Sha256::new());
    write_expected(cfg, adds, &mut h)?;
    Ok(h.0.finalize().into())
}

fn digest_reader(mut r: impl Read) -> io::Result<[u8; 32]> {
    let mut h = HashWriter(Sha256::new());
    io::copy(&mut r, &mut h)?;
    Ok(h.0.finalize().into())
}

/// Streams a container from `r` to `w`, adding `c` to every f32 element.
pub fn add_constant<R: Read, W: Write>(r: R, w: W, c: f32) -> Result<u64> {
    let mut reader = ModelReader::new(r);
    let mut writer = ModelWriter::new(w);
    let header = reader.read_header()?;
    writer.write_header(&ContainerHeader {
        current_round: header.current_round + 1,
        ..header
    })?;
    for _ in 0..header.param_count {
        let ph = reader.read_param_header()?;
        if ph.dtype != DType::F32 {
            return Err(BenchError::Invalid(format!("{} is not f32", ph.name)));
        }
        writer.write_param_header(&ph.name, ph.dtype, &ph.shape)?;
        let mut left = ph.data_len;
        while left > 0 {
            let n = left.min(BLOCK as u64);
            let mut bytes = reader.read_data(n)?;
            for e in bytes.chunks_exact_mut(4) {
                let v = f32::from_le_bytes([e[0], e[1], e[2], e[3]]) + c;
                e.copy_from_slice(&v.to_le_bytes());
            }
            writer.write_data(&bytes)?;
            left -= n;
        }
    }
    let (metrics, meta) = reader.read_trailer()?;
    writer.write_trailer(&metrics, &meta)?;
    Ok(writer.bytes_written())
}

fn scratch(cfg: &BenchConfig) -> io::Result<tempfile::TempDir> {
    match &cfg.work_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            tempfile::tempdir_in(d)
        }
        None => tempfile::tempdir(),
    }
}

/// Body for the model with `adds` additions, in the configured mode.
fn payload(cfg: &BenchConfig, adds: u32, dir: &Path, topic: &str) -> Result<Message> {
    match cfg.mode {
        BenchMode::Blob => {
            let mut bytes = Vec::new();
            write_expected(cfg, adds, &mut bytes)?;
            Ok(Message::object(topic, bytes))
        }
        BenchMode::File => {
            let path = dir.join(format!("model_{adds}.flm"));
            let mut w = BufWriter::new(File::create(&path)?);
            write_expected(cfg, adds, &mut w)?;
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            Ok(Message::file(topic, FileBody::open(path)?))
        }
    }
}

fn body_reader(msg: &Message) -> io::Result<Box<dyn Read + '_>> {
    match &msg.body {
        Body::Bytes(b) => Ok(Box::new(&b[..])),
        Body::File(f) => Ok(Box::new(BufReader::new(f.reader()?))),
        Body::Stream { .. } => Err(io::Error::other("stream bodies are not received")),
    }
}

fn run_bench_client(cfg: BenchConfig, address: String, index: usize) -> Result<EndpointStats> {
    let dir = scratch(&cfg)?;
    let driver = driver_for(&cfg.driver)?;
    let ep = Endpoint::new(
        driver.connect(&address)?,
        Role::Initiator,
        cfg.sfm(Some(dir.path().to_owned())),
    );
    loop {
        let msg = ep.recv_message(None)?;
        if msg.topic == TOPIC_BENCH_END {
            break;
        }
        let round = msg.header(HDR_ROUND).unwrap_or("0").to_owned();
        let reply = match cfg.mode {
            BenchMode::Blob => {
                let mut out = Vec::with_capacity(msg.total_size() as usize);
                add_constant(body_reader(&msg)?, &mut out, cfg.constant)?;
                drop(msg);
                Message::object(TOPIC_BENCH_RESULT, out)
            }
            BenchMode::File => {
                let path = dir.path().join(format!("client_{index}_{round}.flm"));
                let mut w = BufWriter::new(File::create(&path)?);
                add_constant(body_reader(&msg)?, &mut w, cfg.constant)?;
                w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
                drop(msg);
                Message::file(TOPIC_BENCH_RESULT, FileBody::open(&path)?)
            }
        };
        ep.send_message(reply.with_header(HDR_ROUND, round.as_str()))?;
        if cfg.mode == BenchMode::File {
            let _ = std::fs::remove_file(dir.path().join(format!("client_{index}_{round}.flm")));
        }
    }
    let stats = ep.stats();
    ep.close();
    Ok(stats)
}

/// Runs the benchmark with in-process client threads over the configured driver.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let dir = scratch(cfg)?;
    let driver = driver_for(&cfg.driver)?;
    let listen = if cfg.driver == "tcp" {
        "127.0.0.1:0".to_owned()
    } else {
        format!("fedsim-bench-{}-{:?}", std::process::id(), thread::current().id())
    };
    let acceptor = driver.listen(&listen)?;
    let address = acceptor.local_address();
    let clients: Vec<_> = (0..cfg.clients)
        .map(|i| {
            let (c, a) = (cfg.clone(), address.clone());
            thread::spawn(move || run_bench_client(c, a, i))
        })
        .collect();
    let endpoints: Vec<Arc<Endpoint>> = (0..cfg.clients)
        .map(|_| {
            acceptor
                .accept()
                .map(|conn| Arc::new(Endpoint::new(conn, Role::Acceptor, cfg.sfm(Some(dir.path().to_owned())))))
        })
        .collect::<std::result::Result<_, _>>()?;
    acceptor.close();

    let message_size = FIXED_HEADER_LEN
        + (0..cfg.keys)
            .map(|k| param_entry_len(key_name(k).len(), DType::F32, &[cfg.key_bytes / 4]).unwrap_or(0))
            .sum::<u64>();
    let mut round_secs = Vec::new();
    let mut frames_per_round = Vec::new();
    let mut verified_rounds = 0;
    let mut transfer = Duration::ZERO;
    for round in 0..cfg.rounds {
        let expected = expected_digest(cfg, round + 1)?;
        let before = sum_stats(&endpoints);
        let started = Instant::now();
        let first = payload(cfg, round, dir.path(), TOPIC_BENCH_TASK)?;
        let mut messages = vec![first];
        for _ in 1..endpoints.len() {
            let again = match &messages[0].body {
                Body::Bytes(b) => Message::object(TOPIC_BENCH_TASK, b.to_vec()),
                Body::File(f) => Message::file(TOPIC_BENCH_TASK, FileBody::open(f.path())?),
                Body::Stream { .. } => unreachable!("bench payloads are bytes or files"),
            };
            messages.push(again);
        }
        let workers: Vec<_> = endpoints
            .iter()
            .zip(messages)
            .enumerate()
            .map(|(i, (ep, msg))| {
                let ep = ep.clone();
                let msg: Result<Message> = Ok(msg.with_header(HDR_ROUND, round.to_string()));
                thread::spawn(move || -> Result<[u8; 32]> {
                    ep.send_message(msg?)?;
                    let reply = ep.recv_message(None)?;
                    let digest = digest_reader(body_reader(&reply)?)?;
                    if reply.header(HDR_ROUND) != Some(round.to_string().as_str()) {
                        return Err(BenchError::Client(i, "reply for the wrong round".into()));
                    }
                    Ok(digest)
                })
            })
            .collect();
        for (i, w) in workers.into_iter().enumerate() {
            let digest = w.join().map_err(|_| BenchError::Client(i, "panicked".into()))??;
            if digest != expected {
                return Err(BenchError::Mismatch { round, client: i });
            }
        }
        let elapsed = started.elapsed();
        transfer += elapsed;
        verified_rounds += 1;
        let after = sum_stats(&endpoints);
        frames_per_round.push((
            after.frames_sent - before.frames_sent,
            after.frames_received - before.frames_received,
        ));
        round_secs.push(elapsed.as_secs_f64());
        if cfg.mode == BenchMode::File {
            let _ = std::fs::remove_file(dir.path().join(format!("model_{round}.flm")));
        }
        info!(round, secs = elapsed.as_secs_f64(), "bench round verified");
    }

    for ep in &endpoints {
        ep.send_message(Message::blob(TOPIC_BENCH_END, Vec::new()))?;
    }
    let mut peaks = sum_stats(&endpoints);
    for (i, c) in clients.into_iter().enumerate() {
        let stats = c.join().map_err(|_| BenchError::Client(i, "panicked".into()))??;
        peaks.accumulate(&stats);
    }
    for ep in &endpoints {
        ep.close();
    }
    let moved = 2.0 * cfg.clients as f64 * cfg.rounds as f64 * cfg.payload_bytes() as f64;
    let secs = transfer.as_secs_f64().max(1e-9);
    Ok(BenchReport {
        payload_size: cfg.payload_bytes(),
        message_size,
        chunk_size: cfg.chunk_size,
        driver: cfg.driver.clone(),
        mode: cfg.mode,
        rounds: cfg.rounds,
        clients: cfg.clients,
        throughput_mb_s: moved / MIB / secs,
        sender_peak_buffer: peaks.sender_peak_buffer,
        receiver_peak_buffer: peaks.receiver_peak_buffer,
        round_secs,
        verified_rounds,
        frames_per_round,
    })
}

fn sum_stats(endpoints: &[Arc<Endpoint>]) -> EndpointStats {
    let mut total = EndpointStats::default();
    for ep in endpoints {
        total.accumulate(&ep.stats());
    }
    total
}
