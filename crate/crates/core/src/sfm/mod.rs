//! Streamable framed messages.
//!
//! Messages of any size are cut into fixed-size DATA frames, multiplexed by stream id
//! over a single ordered byte connection, and reassembled on the far side. The byte
//! connection itself comes from a [`driver::Driver`], so everything above this layer is
//! indifferent to whether it runs over TCP or an in-process pipe.

pub mod chunk;
pub mod demux;
pub mod driver;
pub mod endpoint;
pub mod frame;
pub mod message;

use std::fmt;
use std::io;

use thiserror::Error;

pub use chunk::{chunk_payload, frame_count, reassemble, Reassembler};
pub use demux::{Demux, DemuxEvent};
pub use driver::{driver_for, open_endpoint, Acceptor, Connection, Driver, Mode, Opened};
pub use endpoint::{Endpoint, EndpointStats, Role, SendReceipt, SfmConfig};
pub use frame::{Frame, FrameType};
pub use message::{Body, ContentKind, FileBody, Message};

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown frame type {0}")]
    UnknownFrameType(u8),
    #[error("reserved flag bits set: {0:#06x}")]
    ReservedFlags(u16),
    #[error("frame section too large: {what} is {len} bytes, limit {limit}")]
    FrameTooLarge { what: &'static str, len: u64, limit: u64 },
    #[error("connection ended mid-frame")]
    TruncatedFrame,
    #[error("stream {stream_id}: expected seq {expected}, got {got}")]
    SeqGap { stream_id: u64, expected: u32, got: u32 },
    #[error("stream {stream_id}: duplicate frame seq {seq}")]
    DuplicateFrame { stream_id: u64, seq: u32 },
    #[error("stream {stream_id}: crc mismatch on seq {seq}")]
    CrcMismatch { stream_id: u64, seq: u32 },
    #[error("stream {stream_id}: closed before FINAL frame")]
    MissingFinal { stream_id: u64 },
    #[error("stream {stream_id}: frame after FINAL")]
    FrameAfterFinal { stream_id: u64 },
    #[error("stream {stream_id}: frame for unknown stream")]
    UnknownStream { stream_id: u64 },
    #[error("stream {stream_id}: opened twice")]
    DuplicateStream { stream_id: u64 },
    #[error("frame belongs to stream {got}, expected {expected}")]
    StreamMismatch { expected: u64, got: u64 },
    #[error("stream {stream_id}: declared {declared} bytes, received {received}")]
    SizeMismatch { stream_id: u64, declared: u64, received: u64 },
    #[error("invalid message headers: {0}")]
    InvalidHeaders(String),
    #[error("chunk size {0} outside [4 KiB, 16 MiB]")]
    InvalidChunkSize(u64),
    #[error("stream {stream_id}: peer reported error: {reason}")]
    PeerError { stream_id: u64, reason: String },
    #[error("connection closed")]
    ConnectionClosed,
    #[error("timed out")]
    Timeout,
    #[error("address in use: {0}")]
    AddressInUse(String),
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("driver unavailable: {0}")]
    DriverUnavailable(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl SfmError {
    /// Stream-scoped errors abort one stream; the connection keeps going.
    pub fn stream_id(&self) -> Option<u64> {
        match self {
            SfmError::SeqGap { stream_id, .. }
            | SfmError::DuplicateFrame { stream_id, .. }
            | SfmError::CrcMismatch { stream_id, .. }
            | SfmError::MissingFinal { stream_id }
            | SfmError::FrameAfterFinal { stream_id }
            | SfmError::UnknownStream { stream_id }
            | SfmError::DuplicateStream { stream_id }
            | SfmError::SizeMismatch { stream_id, .. }
            | SfmError::PeerError { stream_id, .. } => Some(*stream_id),
            _ => None,
        }
    }

    pub fn is_fatal(&self) -> bool {
        self.stream_id().is_none() && !matches!(self, SfmError::Timeout)
    }
}

pub type Result<T, E = SfmError> = std::result::Result<T, E>;

/// Payload bytes per DATA frame, within `[MIN, MAX]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkSize(u32);

impl ChunkSize {
    pub const MIN: u32 = 4 * 1024;
    pub const MAX: u32 = 16 * 1024 * 1024;
    pub const DEFAULT: ChunkSize = ChunkSize(1024 * 1024);

    pub fn new(bytes: u64) -> Result<Self> {
        if (Self::MIN as u64..=Self::MAX as u64).contains(&bytes) {
            Ok(ChunkSize(bytes as u32))
        } else {
            Err(SfmError::InvalidChunkSize(bytes))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn bytes(self) -> usize {
        self.0 as usize
    }
}

impl Default for ChunkSize {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for ChunkSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
