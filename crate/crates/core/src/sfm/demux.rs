//! Receive-side stream demultiplexer: turns an ordered frame sequence carrying any number
//! of interleaved streams into completed messages.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;

use tracing::debug;

use super::chunk::Reassembler;
use super::endpoint::BufferGauge;
use super::frame::{Frame, FrameType};
use super::message::{parse_hello, Body, ContentKind, FileBody, Hello, Message};
use super::SfmError;

const FILE_WRITE_BUFFER: usize = 64 * 1024;

#[derive(Debug)]
pub enum DemuxEvent {
    /// A stream completed; `final_seq` is the seq of its FINAL frame.
    Message { message: Message, stream_id: u64, final_seq: u32 },
    /// The peer acknowledged one of our streams.
    Ack { stream_id: u64, seq: u32 },
    /// The peer reported an error about a stream it did not open.
    PeerError { stream_id: u64, reason: String },
    /// An inbound stream was aborted; later frames for it are dropped.
    StreamFailed { stream_id: u64, error: SfmError },
    Heartbeat,
    /// The peer announced an orderly close.
    Goodbye,
}

enum Sink {
    Memory(Vec<u8>),
    File {
        writer: BufWriter<File>,
        path: tempfile::TempPath,
    },
}

struct InboundStream {
    hello: Hello,
    state: Reassembler,
    sink: Sink,
}

pub struct Demux {
    streams: HashMap<u64, InboundStream>,
    dead: HashSet<u64>,
    spill_dir: Option<PathBuf>,
    gauge: Arc<BufferGauge>,
}

impl Demux {
    pub fn new(spill_dir: Option<PathBuf>, gauge: Arc<BufferGauge>) -> Self {
        Demux {
            streams: HashMap::new(),
            dead: HashSet::new(),
            spill_dir,
            gauge,
        }
    }

    pub fn active_streams(&self) -> usize {
        self.streams.len()
    }

    fn fail(&mut self, stream_id: u64, error: SfmError) -> Option<DemuxEvent> {
        if let Some(stream) = self.streams.remove(&stream_id) {
            self.release(&stream);
        }
        self.dead.insert(stream_id);
        Some(DemuxEvent::StreamFailed { stream_id, error })
    }

    fn release(&self, stream: &InboundStream) {
        match &stream.sink {
            Sink::Memory(buf) => self.gauge.sub(buf.len() as u64),
            Sink::File { .. } => self.gauge.sub(FILE_WRITE_BUFFER as u64),
        }
    }

    pub fn feed(&mut self, frame: Frame) -> Option<DemuxEvent> {
        let stream_id = frame.stream_id;
        match frame.frame_type {
            FrameType::Heartbeat => Some(DemuxEvent::Heartbeat),
            FrameType::Hello => self.open(frame),
            FrameType::Data => self.data(frame),
            FrameType::End => {
                if stream_id == 0 {
                    Some(DemuxEvent::Goodbye)
                } else if self.streams.contains_key(&stream_id) {
                    self.fail(stream_id, SfmError::MissingFinal { stream_id })
                } else {
                    None
                }
            }
            FrameType::Ack => {
                if !frame.crc_ok() {
                    debug!(stream_id, "dropping corrupt ACK");
                    return None;
                }
                Some(DemuxEvent::Ack {
                    stream_id,
                    seq: frame.seq,
                })
            }
            FrameType::Error => {
                let reason = String::from_utf8_lossy(&frame.payload).into_owned();
                if self.streams.contains_key(&stream_id) {
                    self.fail(stream_id, SfmError::PeerError { stream_id, reason })
                } else if self.dead.contains(&stream_id) {
                    None
                } else {
                    Some(DemuxEvent::PeerError { stream_id, reason })
                }
            }
        }
    }

    fn open(&mut self, frame: Frame) -> Option<DemuxEvent> {
        let stream_id = frame.stream_id;
        if self.streams.contains_key(&stream_id) || self.dead.contains(&stream_id) {
            return self.fail(stream_id, SfmError::DuplicateStream { stream_id });
        }
        if !frame.crc_ok() {
            return self.fail(stream_id, SfmError::CrcMismatch { stream_id, seq: frame.seq });
        }
        let hello = match parse_hello(&frame.header) {
            Ok(h) => h,
            Err(e) => return self.fail(stream_id, e),
        };
        let sink = if hello.kind == ContentKind::File {
            let file = match &self.spill_dir {
                Some(dir) => tempfile::NamedTempFile::new_in(dir),
                None => tempfile::NamedTempFile::new(),
            };
            match file {
                Ok(f) => {
                    let (file, path) = f.into_parts();
                    self.gauge.add(FILE_WRITE_BUFFER as u64);
                    Sink::File {
                        writer: BufWriter::with_capacity(FILE_WRITE_BUFFER, file),
                        path,
                    }
                }
                Err(e) => return self.fail(stream_id, SfmError::Io(e)),
            }
        } else {
            Sink::Memory(Vec::with_capacity(hello.total_size.min(1 << 26) as usize))
        };
        self.streams.insert(
            stream_id,
            InboundStream {
                hello,
                state: Reassembler::new(stream_id),
                sink,
            },
        );
        None
    }

    fn data(&mut self, frame: Frame) -> Option<DemuxEvent> {
        let stream_id = frame.stream_id;
        let Some(stream) = self.streams.get_mut(&stream_id) else {
            if self.dead.contains(&stream_id) {
                return None;
            }
            return self.fail(stream_id, SfmError::UnknownStream { stream_id });
        };
        let chunk = frame.payload.len() as u64;
        self.gauge.add(chunk);
        let accepted = stream.state.accept(&frame);
        let result = accepted.and_then(|is_final| {
            let declared = stream.hello.total_size;
            if stream.state.bytes() > declared || (is_final && stream.state.bytes() != declared) {
                return Err(SfmError::SizeMismatch {
                    stream_id,
                    declared,
                    received: stream.state.bytes(),
                });
            }
            match &mut stream.sink {
                Sink::Memory(buf) => {
                    buf.extend_from_slice(&frame.payload);
                    self.gauge.add(chunk);
                }
                Sink::File { writer, .. } => writer.write_all(&frame.payload)?,
            }
            Ok(is_final)
        });
        drop(frame);
        self.gauge.sub(chunk);
        match result {
            Ok(false) => None,
            Ok(true) => self.finish(stream_id),
            Err(e) => self.fail(stream_id, e),
        }
    }

    fn finish(&mut self, stream_id: u64) -> Option<DemuxEvent> {
        let stream = self.streams.remove(&stream_id)?;
        self.release(&stream);
        self.dead.insert(stream_id);
        let final_seq = stream.state.frames() - 1;
        let InboundStream { hello, sink, .. } = stream;
        let body = match sink {
            Sink::Memory(buf) => Body::Bytes(buf),
            Sink::File { writer, path } => match writer.into_inner() {
                Ok(file) => {
                    drop(file);
                    Body::File(FileBody::from_temp(path, hello.total_size))
                }
                Err(e) => {
                    return Some(DemuxEvent::StreamFailed {
                        stream_id,
                        error: SfmError::Io(e.into_error()),
                    })
                }
            },
        };
        let mut headers = hello.headers;
        headers.insert(
            super::message::HDR_CONTENT_KIND.to_owned(),
            hello.kind.as_str().to_owned(),
        );
        Some(DemuxEvent::Message {
            message: Message {
                msg_id: hello.msg_id,
                topic: hello.topic,
                headers,
                body,
            },
            stream_id,
            final_seq,
        })
    }

    /// Ends all open streams because the connection went away.
    pub fn close(&mut self) -> Vec<(u64, SfmError)> {
        let ids: Vec<u64> = self.streams.keys().copied().collect();
        ids.into_iter()
            .map(|stream_id| {
                if let Some(s) = self.streams.remove(&stream_id) {
                    self.release(&s);
                }
                (stream_id, SfmError::MissingFinal { stream_id })
            })
            .collect()
    }
}
