//! A message endpoint over one [`Connection`].
//!
//! Each endpoint runs a reader thread that demultiplexes inbound frames, and a control
//! thread that writes ACK / ERROR / HEARTBEAT frames. Data frames are written by the
//! sending thread itself. All frame writes go through one mutex, so frames from
//! concurrent streams interleave but never tear.
//!
//! Stream ids are odd for the connecting side and even for the accepting side, which
//! keeps the two directions' id spaces apart on a shared connection.

use std::collections::HashMap;
use std::io::{BufWriter, Read, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use tracing::{debug, warn};

use super::demux::{Demux, DemuxEvent};
use super::driver::Connection;
use super::frame::{self, write_frame_parts, Frame, FrameType, FLAG_FINAL};
use super::message::{Body, Message};
use super::{chunk, ChunkSize, Result, SfmError};

/// Upper bound on how long `close` waits for queued control frames to reach the wire.
const CLOSE_FLUSH: Duration = Duration::from_secs(2);

/// Tracks bytes currently held in stream buffers and the high-water mark.
#[derive(Debug, Default)]
pub struct BufferGauge {
    current: AtomicU64,
    peak: AtomicU64,
}

impl BufferGauge {
    pub fn add(&self, n: u64) {
        let now = self.current.fetch_add(n, Ordering::AcqRel) + n;
        self.peak.fetch_max(now, Ordering::AcqRel);
    }

    pub fn sub(&self, n: u64) {
        self.current.fetch_sub(n, Ordering::AcqRel);
    }

    pub fn current(&self) -> u64 {
        self.current.load(Ordering::Acquire)
    }

    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::Acquire)
    }

    pub fn reset_peak(&self) {
        self.peak.store(self.current(), Ordering::Release);
    }
}

#[derive(Debug, Clone)]
pub struct SfmConfig {
    pub chunk_size: ChunkSize,
    /// Maximum chunks a file or stream body may have read ahead of the wire.
    pub window: usize,
    pub ack_timeout: Duration,
    /// Where inbound `file` bodies are spilled; the system temp dir when `None`.
    pub spill_dir: Option<PathBuf>,
    pub heartbeat_interval: Option<Duration>,
    /// Close the connection when the peer has sent nothing for this long.
    pub idle_timeout: Option<Duration>,
}

impl Default for SfmConfig {
    fn default() -> Self {
        SfmConfig {
            chunk_size: ChunkSize::DEFAULT,
            window: 16,
            ack_timeout: Duration::from_secs(600),
            spill_dir: None,
            heartbeat_interval: None,
            idle_timeout: None,
        }
    }
}

impl SfmConfig {
    pub fn with_chunk_size(mut self, chunk_size: ChunkSize) -> Self {
        self.chunk_size = chunk_size;
        self
    }

    pub fn with_heartbeat(mut self, interval: Duration) -> Self {
        self.heartbeat_interval = Some(interval);
        self.idle_timeout = Some(interval * 2);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Acceptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendReceipt {
    pub stream_id: u64,
    pub frames: u64,
    pub payload_bytes: u64,
    pub wire_bytes: u64,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct EndpointStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
    pub sender_peak_buffer: u64,
    pub receiver_peak_buffer: u64,
}

impl EndpointStats {
    /// Adds counters and keeps the larger peaks.
    pub fn accumulate(&mut self, other: &EndpointStats) {
        self.bytes_sent += other.bytes_sent;
        self.bytes_received += other.bytes_received;
        self.frames_sent += other.frames_sent;
        self.frames_received += other.frames_received;
        self.messages_sent += other.messages_sent;
        self.messages_received += other.messages_received;
        self.sender_peak_buffer = self.sender_peak_buffer.max(other.sender_peak_buffer);
        self.receiver_peak_buffer = self.receiver_peak_buffer.max(other.receiver_peak_buffer);
    }
}

enum Inbound {
    Message(Message),
    Failed(SfmError),
    Closed(SfmError),
}

type AckResult = std::result::Result<u32, SfmError>;

#[derive(Default)]
struct Counters {
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
    frames_sent: AtomicU64,
    frames_received: AtomicU64,
    messages_sent: AtomicU64,
    messages_received: AtomicU64,
}

struct Shared {
    writer: Mutex<Option<BufWriter<Box<dyn Write + Send>>>>,
    acks: Mutex<HashMap<u64, Sender<AckResult>>>,
    next_stream: AtomicU64,
    closed: AtomicBool,
    idle_expired: AtomicBool,
    /// Control frames queued but not yet written.
    pending_control: AtomicU64,
    shutdown: Arc<dyn Fn() + Send + Sync>,
    started: Instant,
    last_seen_ms: AtomicU64,
    counters: Counters,
    sender_gauge: Arc<BufferGauge>,
    receiver_gauge: Arc<BufferGauge>,
    config: SfmConfig,
}

impl Shared {
    fn write_frame(
        &self,
        frame_type: FrameType,
        flags: u16,
        stream_id: u64,
        seq: u32,
        header: &[u8],
        payload: &[u8],
    ) -> Result<u64> {
        let mut guard = self.writer.lock().unwrap();
        let w = guard.as_mut().ok_or(SfmError::ConnectionClosed)?;
        let written = write_frame_parts(w, frame_type, flags, stream_id, seq, header, payload)
            .and_then(|n| w.flush().map(|_| n));
        match written {
            Ok(n) => {
                self.counters.bytes_sent.fetch_add(n, Ordering::Relaxed);
                self.counters.frames_sent.fetch_add(1, Ordering::Relaxed);
                Ok(n)
            }
            Err(e) => {
                debug!(error = %e, "frame write failed; closing connection");
                *guard = None;
                drop(guard);
                self.mark_closed();
                Err(SfmError::ConnectionClosed)
            }
        }
    }

    /// Writes `frame`; `count` is false for control frames, which are counted when queued.
    fn write_owned(&self, frame: &Frame, count: bool) -> Result<u64> {
        let mut guard = self.writer.lock().unwrap();
        let w = guard.as_mut().ok_or(SfmError::ConnectionClosed)?;
        match frame.write_to(w).and_then(|_| w.flush()) {
            Ok(()) => {
                let n = frame.wire_len();
                if count {
                    self.counters.bytes_sent.fetch_add(n, Ordering::Relaxed);
                    self.counters.frames_sent.fetch_add(1, Ordering::Relaxed);
                }
                Ok(n)
            }
            Err(_) => {
                *guard = None;
                drop(guard);
                self.mark_closed();
                Err(SfmError::ConnectionClosed)
            }
        }
    }

    /// Hands a frame to the control writer. It is counted as sent here so that the counters
    /// are settled by the time the event that triggered it is observable.
    fn queue_control(&self, control: &Sender<Frame>, frame: Frame) -> bool {
        self.counters.bytes_sent.fetch_add(frame.wire_len(), Ordering::Relaxed);
        self.counters.frames_sent.fetch_add(1, Ordering::Relaxed);
        self.pending_control.fetch_add(1, Ordering::AcqRel);
        if control.send(frame).is_ok() {
            return true;
        }
        self.pending_control.fetch_sub(1, Ordering::AcqRel);
        false
    }

    fn mark_closed(&self) {
        if !self.closed.swap(true, Ordering::AcqRel) {
            (self.shutdown)();
        }
    }

    fn touch(&self) {
        let ms = self.started.elapsed().as_millis() as u64;
        self.last_seen_ms.store(ms, Ordering::Release);
    }

    fn idle_for(&self) -> Duration {
        let now = self.started.elapsed().as_millis() as u64;
        Duration::from_millis(now.saturating_sub(self.last_seen_ms.load(Ordering::Acquire)))
    }

    fn fail_waiters(&self) {
        for (_, tx) in self.acks.lock().unwrap().drain() {
            let _ = tx.send(Err(SfmError::ConnectionClosed));
        }
    }
}

pub struct Endpoint {
    shared: Arc<Shared>,
    inbox: Receiver<Inbound>,
    control: Mutex<Option<Sender<Frame>>>,
    stop_heartbeat: Mutex<Option<mpsc::Sender<()>>>,
    terminal: AtomicBool,
    threads: Mutex<Vec<JoinHandle<()>>>,
    peer: String,
}

impl Endpoint {
    pub fn new(conn: Connection, role: Role, config: SfmConfig) -> Self {
        let peer = conn.peer().to_owned();
        let (reader, writer, shutdown) = conn.into_parts();
        let shared = Arc::new(Shared {
            writer: Mutex::new(Some(BufWriter::with_capacity(64 * 1024, writer))),
            acks: Mutex::new(HashMap::new()),
            next_stream: AtomicU64::new(match role {
                Role::Initiator => 1,
                Role::Acceptor => 2,
            }),
            closed: AtomicBool::new(false),
            idle_expired: AtomicBool::new(false),
            pending_control: AtomicU64::new(0),
            shutdown,
            started: Instant::now(),
            last_seen_ms: AtomicU64::new(0),
            counters: Counters::default(),
            sender_gauge: Arc::new(BufferGauge::default()),
            receiver_gauge: Arc::new(BufferGauge::default()),
            config,
        });
        let (inbox_tx, inbox) = unbounded();
        let (control_tx, control_rx) = unbounded::<Frame>();
        let mut threads = Vec::new();

        let s = shared.clone();
        let ctl = control_tx.clone();
        threads.push(
            thread::Builder::new()
                .name("sfm-reader".into())
                .spawn(move || reader_loop(reader, s, ctl, inbox_tx))
                .expect("spawn reader"),
        );

        let s = shared.clone();
        threads.push(
            thread::Builder::new()
                .name("sfm-control".into())
                .spawn(move || {
                    for frame in control_rx {
                        let written = s.write_owned(&frame, false);
                        s.pending_control.fetch_sub(1, Ordering::AcqRel);
                        if written.is_err() {
                            break;
                        }
                    }
                })
                .expect("spawn control writer"),
        );

        let mut stop_heartbeat = None;
        if let Some(interval) = shared.config.heartbeat_interval {
            let (stop_tx, stop_rx) = mpsc::channel::<()>();
            stop_heartbeat = Some(stop_tx);
            let s = shared.clone();
            let ctl = control_tx.clone();
            threads.push(
                thread::Builder::new()
                    .name("sfm-heartbeat".into())
                    .spawn(move || heartbeat_loop(s, ctl, stop_rx, interval))
                    .expect("spawn heartbeat"),
            );
        }

        Endpoint {
            shared,
            inbox,
            control: Mutex::new(Some(control_tx)),
            stop_heartbeat: Mutex::new(stop_heartbeat),
            terminal: AtomicBool::new(false),
            threads: Mutex::new(threads),
            peer,
        }
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn config(&self) -> &SfmConfig {
        &self.shared.config
    }

    pub fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::Acquire)
    }

    /// Time since the last frame of any kind arrived.
    pub fn idle_for(&self) -> Duration {
        self.shared.idle_for()
    }

    pub fn stats(&self) -> EndpointStats {
        let c = &self.shared.counters;
        EndpointStats {
            bytes_sent: c.bytes_sent.load(Ordering::Relaxed),
            bytes_received: c.bytes_received.load(Ordering::Relaxed),
            frames_sent: c.frames_sent.load(Ordering::Relaxed),
            frames_received: c.frames_received.load(Ordering::Relaxed),
            messages_sent: c.messages_sent.load(Ordering::Relaxed),
            messages_received: c.messages_received.load(Ordering::Relaxed),
            sender_peak_buffer: self.shared.sender_gauge.peak(),
            receiver_peak_buffer: self.shared.receiver_gauge.peak(),
        }
    }

    pub fn sender_gauge(&self) -> &BufferGauge {
        &self.shared.sender_gauge
    }

    pub fn receiver_gauge(&self) -> &BufferGauge {
        &self.shared.receiver_gauge
    }

    /// Writes a pre-built frame as-is. Intended for fault injection.
    pub fn send_frame(&self, frame: &Frame) -> Result<u64> {
        self.shared.write_owned(frame, true)
    }

    pub fn send_heartbeat(&self) -> Result<()> {
        self.shared
            .write_frame(FrameType::Heartbeat, 0, 0, 0, &[], &[])
            .map(|_| ())
    }

    /// Streams `msg` to the peer and waits for the acknowledgement of its FINAL frame.
    pub fn send_message(&self, mut msg: Message) -> Result<SendReceipt> {
        let started = Instant::now();
        let shared = &*self.shared;
        if shared.closed.load(Ordering::Acquire) {
            return Err(SfmError::ConnectionClosed);
        }
        let stream_id = shared.next_stream.fetch_add(2, Ordering::Relaxed);
        if msg.msg_id == 0 {
            msg.msg_id = stream_id;
        }
        let hello = msg.encode_hello()?;
        let (ack_tx, ack_rx) = bounded(1);
        shared.acks.lock().unwrap().insert(stream_id, ack_tx);

        let result = (|| {
            let mut wire = shared.write_frame(FrameType::Hello, 0, stream_id, 0, &hello, &[])?;
            let chunk = shared.config.chunk_size;
            let total = msg.body.len();
            let frames = chunk::frame_count(total, chunk);
            wire += match &mut msg.body {
                Body::Bytes(bytes) => self.send_slices(stream_id, bytes, chunk)?,
                Body::File(file) => {
                    let f = file.reader()?;
                    self.send_from_reader(stream_id, f, total, frames)?
                }
                Body::Stream { reader, .. } => {
                    self.send_from_reader(stream_id, reader.as_mut(), total, frames)?
                }
            };
            Ok((wire, frames, total))
        })();

        let (wire, frames, total) = match result {
            Ok(v) => v,
            Err(e) => {
                shared.acks.lock().unwrap().remove(&stream_id);
                return Err(e);
            }
        };
        let outcome = match ack_rx.recv_timeout(shared.config.ack_timeout) {
            Ok(Ok(_)) => Ok(()),
            Ok(Err(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) => Err(SfmError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(SfmError::ConnectionClosed),
        };
        shared.acks.lock().unwrap().remove(&stream_id);
        outcome?;
        shared.counters.messages_sent.fetch_add(1, Ordering::Relaxed);
        Ok(SendReceipt {
            stream_id,
            frames,
            payload_bytes: total,
            wire_bytes: wire,
            elapsed: started.elapsed(),
        })
    }

    fn send_slices(&self, stream_id: u64, bytes: &[u8], chunk: ChunkSize) -> Result<u64> {
        let n = chunk::frame_count(bytes.len() as u64, chunk) as usize;
        let mut wire = 0;
        for i in 0..n {
            let start = i * chunk.bytes();
            let end = (start + chunk.bytes()).min(bytes.len());
            let flags = if i + 1 == n { FLAG_FINAL } else { 0 };
            wire += self.shared.write_frame(
                FrameType::Data,
                flags,
                stream_id,
                i as u32,
                &[],
                &bytes[start..end],
            )?;
        }
        Ok(wire)
    }

    /// Reads ahead at most `window` chunks on a helper thread while this thread writes.
    fn send_from_reader<R: Read + Send>(
        &self,
        stream_id: u64,
        mut source: R,
        total: u64,
        frames: u64,
    ) -> Result<u64> {
        let shared = &*self.shared;
        let chunk = shared.config.chunk_size.bytes();
        let window = shared.config.window.max(1);
        let gauge = shared.sender_gauge.clone();
        let (full_tx, full_rx) = mpsc::sync_channel::<std::io::Result<(Vec<u8>, usize)>>(window);
        let (free_tx, free_rx) = mpsc::sync_channel::<Vec<u8>>(window);

        // `move` so the consumer's channel ends drop on early return and release the reader.
        thread::scope(move |scope| {
            let g = gauge.clone();
            scope.spawn(move || {
                let mut allocated = 0;
                let mut remaining = total;
                for _ in 0..frames {
                    let mut buf = match free_rx.try_recv() {
                        Ok(buf) => buf,
                        Err(_) if allocated < window => {
                            allocated += 1;
                            vec![0u8; chunk]
                        }
                        Err(_) => match free_rx.recv() {
                            Ok(buf) => buf,
                            Err(_) => return,
                        },
                    };
                    let want = remaining.min(chunk as u64) as usize;
                    let read = source.read_exact(&mut buf[..want]).map(|_| {
                        g.add(want as u64);
                        (buf, want)
                    });
                    let failed = read.is_err();
                    if full_tx.send(read).is_err() || failed {
                        return;
                    }
                    remaining -= want as u64;
                }
            });

            let mut wire = 0;
            for seq in 0..frames {
                let (buf, len) = match full_rx.recv() {
                    Ok(Ok(item)) => item,
                    Ok(Err(e)) => {
                        self.abort_stream(stream_id, &format!("source read failed: {e}"));
                        return Err(SfmError::Io(e));
                    }
                    Err(_) => return Err(SfmError::ConnectionClosed),
                };
                let flags = if seq + 1 == frames { FLAG_FINAL } else { 0 };
                let written = shared.write_frame(
                    FrameType::Data,
                    flags,
                    stream_id,
                    seq as u32,
                    &[],
                    &buf[..len],
                );
                gauge.sub(len as u64);
                wire += written?;
                let _ = free_tx.send(buf);
            }
            Ok(wire)
        })
    }

    fn abort_stream(&self, stream_id: u64, reason: &str) {
        let _ = self.shared.write_frame(
            FrameType::Error,
            0,
            stream_id,
            0,
            &[],
            reason.as_bytes(),
        );
    }

    /// Next completed inbound message. Stream-scoped failures are returned as errors
    /// without closing the endpoint; see [`SfmError::is_fatal`].
    pub fn recv_message(&self, timeout: Option<Duration>) -> Result<Message> {
        if self.terminal.load(Ordering::Acquire) {
            return Err(SfmError::ConnectionClosed);
        }
        let item = match timeout {
            Some(t) => match self.inbox.recv_timeout(t) {
                Ok(item) => item,
                Err(RecvTimeoutError::Timeout) => return Err(SfmError::Timeout),
                Err(RecvTimeoutError::Disconnected) => return Err(SfmError::ConnectionClosed),
            },
            None => self.inbox.recv().map_err(|_| SfmError::ConnectionClosed)?,
        };
        match item {
            Inbound::Message(m) => Ok(m),
            Inbound::Failed(e) => Err(e),
            Inbound::Closed(e) => {
                self.terminal.store(true, Ordering::Release);
                Err(e)
            }
        }
    }

    /// Flushes queued control frames, sends a goodbye if the writer is free, then tears the
    /// connection down.
    pub fn close(&self) {
        let flush_deadline = Instant::now() + CLOSE_FLUSH;
        while self.shared.pending_control.load(Ordering::Acquire) > 0
            && !self.shared.closed.load(Ordering::Acquire)
            && Instant::now() < flush_deadline
        {
            thread::sleep(Duration::from_millis(1));
        }
        if !self.shared.closed.load(Ordering::Acquire) {
            if let Ok(mut guard) = self.shared.writer.try_lock() {
                if let Some(w) = guard.as_mut() {
                    let _ = write_frame_parts(w, FrameType::End, 0, 0, 0, &[], &[])
                        .and_then(|_| w.flush());
                }
            }
        }
        self.shared.mark_closed();
        self.control.lock().unwrap().take();
        self.stop_heartbeat.lock().unwrap().take();
        let threads: Vec<_> = self.threads.lock().unwrap().drain(..).collect();
        let me = thread::current().id();
        for t in threads {
            if t.thread().id() != me {
                let _ = t.join();
            }
        }
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.close();
    }
}

fn reader_loop(
    mut reader: Box<dyn Read + Send>,
    shared: Arc<Shared>,
    control: Sender<Frame>,
    inbox: Sender<Inbound>,
) {
    let mut reader = std::io::BufReader::with_capacity(64 * 1024, &mut reader);
    let mut demux = Demux::new(
        shared.config.spill_dir.clone(),
        shared.receiver_gauge.clone(),
    );
    shared.touch();
    let reason = loop {
        let frame = match frame::read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break SfmError::ConnectionClosed,
            Err(e) => {
                if shared.closed.load(Ordering::Acquire) {
                    break SfmError::ConnectionClosed;
                }
                break e;
            }
        };
        shared.touch();
        // the goodbye is uncounted on both sides: whether it arrives depends on close timing
        let goodbye = frame.frame_type == FrameType::End && frame.stream_id == 0;
        if !goodbye {
            shared
                .counters
                .bytes_received
                .fetch_add(frame.wire_len(), Ordering::Relaxed);
            shared.counters.frames_received.fetch_add(1, Ordering::Relaxed);
        }
        match demux.feed(frame) {
            None | Some(DemuxEvent::Heartbeat) => {}
            Some(DemuxEvent::Message {
                message,
                stream_id,
                final_seq,
            }) => {
                shared.queue_control(&control, Frame::control(FrameType::Ack, stream_id, final_seq));
                shared
                    .counters
                    .messages_received
                    .fetch_add(1, Ordering::Relaxed);
                if inbox.send(Inbound::Message(message)).is_err() {
                    break SfmError::ConnectionClosed;
                }
            }
            Some(DemuxEvent::Ack { stream_id, seq }) => {
                if let Some(tx) = shared.acks.lock().unwrap().remove(&stream_id) {
                    let _ = tx.send(Ok(seq));
                }
            }
            Some(DemuxEvent::PeerError { stream_id, reason }) => {
                if let Some(tx) = shared.acks.lock().unwrap().remove(&stream_id) {
                    let _ = tx.send(Err(SfmError::PeerError { stream_id, reason }));
                }
            }
            Some(DemuxEvent::StreamFailed { stream_id, error }) => {
                if !matches!(error, SfmError::PeerError { .. }) {
                    warn!(stream_id, %error, "inbound stream aborted");
                    let frame = Frame::new(
                        FrameType::Error,
                        0,
                        stream_id,
                        0,
                        Vec::new(),
                        error.to_string().into_bytes(),
                    );
                    shared.queue_control(&control, frame);
                }
                let _ = inbox.send(Inbound::Failed(error));
            }
            Some(DemuxEvent::Goodbye) => debug!("peer said goodbye"),
        }
    };
    let reason = if shared.idle_expired.load(Ordering::Acquire) {
        SfmError::Timeout
    } else {
        reason
    };
    debug!(%reason, "reader stopping");
    shared.mark_closed();
    shared.fail_waiters();
    for (_, e) in demux.close() {
        let _ = inbox.send(Inbound::Failed(e));
    }
    let _ = inbox.send(Inbound::Closed(reason));
}

fn heartbeat_loop(
    shared: Arc<Shared>,
    control: Sender<Frame>,
    stop: mpsc::Receiver<()>,
    interval: Duration,
) {
    let tick = interval.min(Duration::from_millis(250)).max(Duration::from_millis(10));
    let mut since_beat = Duration::ZERO;
    loop {
        match stop.recv_timeout(tick) {
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            _ => return,
        }
        if shared.closed.load(Ordering::Acquire) {
            return;
        }
        since_beat += tick;
        if since_beat >= interval {
            since_beat = Duration::ZERO;
            if !shared.queue_control(&control, Frame::control(FrameType::Heartbeat, 0, 0)) {
                return;
            }
        }
        if let Some(limit) = shared.config.idle_timeout {
            if shared.idle_for() > limit {
                warn!(?limit, "peer silent past idle timeout; closing");
                shared.idle_expired.store(true, Ordering::Release);
                shared.mark_closed();
                return;
            }
        }
    }
}
