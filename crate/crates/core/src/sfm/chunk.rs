use super::frame::{Frame, FrameType};
use super::{ChunkSize, Result, SfmError};

/// Number of DATA frames needed for `len` payload bytes. Never zero: an empty payload
/// still travels as one FINAL frame.
pub fn frame_count(len: u64, chunk: ChunkSize) -> u64 {
    len.div_ceil(chunk.get() as u64).max(1)
}

/// Splits `payload` into DATA frames with consecutive `seq` starting at 0; the last frame
/// carries the FINAL flag.
pub fn chunk_payload(
    payload: &[u8],
    chunk: ChunkSize,
    stream_id: u64,
) -> impl ExactSizeIterator<Item = Frame> + '_ {
    let n = frame_count(payload.len() as u64, chunk) as usize;
    let size = chunk.bytes();
    (0..n).map(move |i| {
        let start = i * size;
        let end = (start + size).min(payload.len());
        Frame::data(stream_id, i as u32, payload[start..end].to_vec(), i + 1 == n)
    })
}

/// Per-stream acceptance state: enforces seq order, CRC and FINAL placement.
#[derive(Debug, Clone)]
pub struct Reassembler {
    stream_id: u64,
    next_seq: u32,
    finished: bool,
    bytes: u64,
}

impl Reassembler {
    pub fn new(stream_id: u64) -> Self {
        Reassembler {
            stream_id,
            next_seq: 0,
            finished: false,
            bytes: 0,
        }
    }

    /// Validates the next DATA frame. Returns `true` if it is the FINAL frame.
    /// The caller consumes `frame.payload` only after this returns `Ok`.
    pub fn accept(&mut self, frame: &Frame) -> Result<bool> {
        let stream_id = self.stream_id;
        if frame.stream_id != stream_id {
            return Err(SfmError::StreamMismatch {
                expected: stream_id,
                got: frame.stream_id,
            });
        }
        if frame.frame_type != FrameType::Data {
            return Err(SfmError::InvalidHeaders(format!(
                "expected DATA frame, got {:?}",
                frame.frame_type
            )));
        }
        if self.finished {
            return Err(SfmError::FrameAfterFinal { stream_id });
        }
        if frame.seq < self.next_seq {
            return Err(SfmError::DuplicateFrame {
                stream_id,
                seq: frame.seq,
            });
        }
        if frame.seq > self.next_seq {
            return Err(SfmError::SeqGap {
                stream_id,
                expected: self.next_seq,
                got: frame.seq,
            });
        }
        if !frame.crc_ok() {
            return Err(SfmError::CrcMismatch {
                stream_id,
                seq: frame.seq,
            });
        }
        self.next_seq = self.next_seq.checked_add(1).ok_or(SfmError::FrameTooLarge {
            what: "stream frame count",
            len: u32::MAX as u64 + 1,
            limit: u32::MAX as u64,
        })?;
        self.bytes += frame.payload.len() as u64;
        self.finished = frame.is_final();
        Ok(self.finished)
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn frames(&self) -> u32 {
        self.next_seq
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

/// Concatenates the payloads of one stream's DATA frames, in order.
pub fn reassemble<I: IntoIterator<Item = Frame>>(frames: I) -> Result<Vec<u8>> {
    let mut frames = frames.into_iter().peekable();
    let Some(first) = frames.peek() else {
        return Err(SfmError::MissingFinal { stream_id: 0 });
    };
    let mut state = Reassembler::new(first.stream_id);
    let mut out = Vec::new();
    for frame in frames {
        state.accept(&frame)?;
        out.extend_from_slice(&frame.payload);
    }
    if !state.is_finished() {
        return Err(SfmError::MissingFinal {
            stream_id: state.stream_id(),
        });
    }
    Ok(out)
}
