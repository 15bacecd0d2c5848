//! The fixed-header wire frame.
//!
//! ```text
//! 0      4        5       6       8           16     20           24            28
//! | SFM1 | version | type | flags | stream_id | seq | header_len | payload_len |
//! | header bytes | payload bytes | crc32 |
//! ```
//!
//! All integers are big-endian. The CRC-32 (IEEE) covers every preceding byte of the frame:
//! the fixed header, the header bytes and the payload.

use std::io::{self, Read, Write};

use super::{ChunkSize, Result, SfmError};

pub const MAGIC: &[u8; 4] = b"SFM1";
pub const VERSION: u8 = 1;
pub const FIXED_LEN: usize = 28;
pub const CRC_LEN: usize = 4;
pub const FLAG_FINAL: u16 = 0x0001;
/// Reserved for payload compression; frames carrying it are rejected.
pub const FLAG_COMPRESSED: u16 = 0x0002;
pub const KNOWN_FLAGS: u16 = FLAG_FINAL;
pub const MAX_HEADER_LEN: u32 = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameType {
    Hello,
    Data,
    End,
    Ack,
    Error,
    Heartbeat,
}

impl FrameType {
    pub fn code(self) -> u8 {
        match self {
            FrameType::Hello => 1,
            FrameType::Data => 2,
            FrameType::End => 3,
            FrameType::Ack => 4,
            FrameType::Error => 5,
            FrameType::Heartbeat => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => FrameType::Hello,
            2 => FrameType::Data,
            3 => FrameType::End,
            4 => FrameType::Ack,
            5 => FrameType::Error,
            6 => FrameType::Heartbeat,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub flags: u16,
    pub stream_id: u64,
    pub seq: u32,
    pub header: Vec<u8>,
    pub payload: Vec<u8>,
    /// As carried on the wire; checked by the consumer, not by [`read_frame`].
    pub crc: u32,
}

/// CRC-32 over every byte of the frame before the CRC field.
pub fn frame_crc(fixed: &[u8], header: &[u8], payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(fixed);
    h.update(header);
    h.update(payload);
    h.finalize()
}

impl Frame {
    pub fn new(
        frame_type: FrameType,
        flags: u16,
        stream_id: u64,
        seq: u32,
        header: Vec<u8>,
        payload: Vec<u8>,
    ) -> Self {
        let fixed = fixed_header(frame_type, flags, stream_id, seq, header.len(), payload.len());
        let crc = frame_crc(&fixed, &header, &payload);
        Frame {
            frame_type,
            flags,
            stream_id,
            seq,
            header,
            payload,
            crc,
        }
    }

    pub fn data(stream_id: u64, seq: u32, payload: Vec<u8>, last: bool) -> Self {
        let flags = if last { FLAG_FINAL } else { 0 };
        Frame::new(FrameType::Data, flags, stream_id, seq, Vec::new(), payload)
    }

    pub fn control(frame_type: FrameType, stream_id: u64, seq: u32) -> Self {
        Frame::new(frame_type, 0, stream_id, seq, Vec::new(), Vec::new())
    }

    pub fn is_final(&self) -> bool {
        self.flags & FLAG_FINAL != 0
    }

    pub fn crc_ok(&self) -> bool {
        frame_crc(&self.fixed(), &self.header, &self.payload) == self.crc
    }

    pub fn wire_len(&self) -> u64 {
        wire_len(self.header.len(), self.payload.len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len() as usize);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn fixed(&self) -> [u8; FIXED_LEN] {
        fixed_header(
            self.frame_type,
            self.flags,
            self.stream_id,
            self.seq,
            self.header.len(),
            self.payload.len(),
        )
    }

    /// Writes the frame with its stored CRC (which may deliberately be wrong in tests).
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.fixed())?;
        w.write_all(&self.header)?;
        w.write_all(&self.payload)?;
        w.write_all(&self.crc.to_be_bytes())
    }
}

pub fn wire_len(header_len: usize, payload_len: usize) -> u64 {
    (FIXED_LEN + header_len + payload_len + CRC_LEN) as u64
}

fn fixed_header(
    frame_type: FrameType,
    flags: u16,
    stream_id: u64,
    seq: u32,
    header_len: usize,
    payload_len: usize,
) -> [u8; FIXED_LEN] {
    let mut b = [0u8; FIXED_LEN];
    b[0..4].copy_from_slice(MAGIC);
    b[4] = VERSION;
    b[5] = frame_type.code();
    b[6..8].copy_from_slice(&flags.to_be_bytes());
    b[8..16].copy_from_slice(&stream_id.to_be_bytes());
    b[16..20].copy_from_slice(&seq.to_be_bytes());
    b[20..24].copy_from_slice(&(header_len as u32).to_be_bytes());
    b[24..28].copy_from_slice(&(payload_len as u32).to_be_bytes());
    b
}

/// Writes a frame from borrowed parts, computing the CRC on the way. Returns wire bytes.
pub fn write_frame_parts<W: Write>(
    w: &mut W,
    frame_type: FrameType,
    flags: u16,
    stream_id: u64,
    seq: u32,
    header: &[u8],
    payload: &[u8],
) -> io::Result<u64> {
    let fixed = fixed_header(frame_type, flags, stream_id, seq, header.len(), payload.len());
    w.write_all(&fixed)?;
    w.write_all(header)?;
    w.write_all(payload)?;
    w.write_all(&frame_crc(&fixed, header, payload).to_be_bytes())?;
    Ok(wire_len(header.len(), payload.len()))
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(map_read_error(e)),
        }
    }
    Ok(filled)
}

fn map_read_error(e: io::Error) -> SfmError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof => SfmError::TruncatedFrame,
        io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe
        | io::ErrorKind::NotConnected => SfmError::ConnectionClosed,
        _ => SfmError::Io(e),
    }
}

/// Reads one frame. `Ok(None)` on a clean end of input at a frame boundary.
///
/// Structural problems in the fixed header are connection-fatal: once lengths cannot be
/// trusted there is no way to find the next frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>> {
    let mut fixed = [0u8; FIXED_LEN];
    match read_full(r, &mut fixed)? {
        0 => return Ok(None),
        FIXED_LEN => {}
        _ => return Err(SfmError::TruncatedFrame),
    }
    let magic: [u8; 4] = fixed[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(SfmError::BadMagic(magic));
    }
    if fixed[4] != VERSION {
        return Err(SfmError::UnsupportedVersion(fixed[4]));
    }
    let frame_type = FrameType::from_code(fixed[5]).ok_or(SfmError::UnknownFrameType(fixed[5]))?;
    let flags = u16::from_be_bytes(fixed[6..8].try_into().unwrap());
    if flags & !KNOWN_FLAGS != 0 {
        return Err(SfmError::ReservedFlags(flags));
    }
    let stream_id = u64::from_be_bytes(fixed[8..16].try_into().unwrap());
    let seq = u32::from_be_bytes(fixed[16..20].try_into().unwrap());
    let header_len = u32::from_be_bytes(fixed[20..24].try_into().unwrap());
    let payload_len = u32::from_be_bytes(fixed[24..28].try_into().unwrap());
    if header_len > MAX_HEADER_LEN {
        return Err(SfmError::FrameTooLarge {
            what: "header",
            len: header_len as u64,
            limit: MAX_HEADER_LEN as u64,
        });
    }
    if payload_len > ChunkSize::MAX {
        return Err(SfmError::FrameTooLarge {
            what: "payload",
            len: payload_len as u64,
            limit: ChunkSize::MAX as u64,
        });
    }
    let mut header = vec![0u8; header_len as usize];
    let mut payload = vec![0u8; payload_len as usize];
    let mut crc = [0u8; CRC_LEN];
    for buf in [&mut header[..], &mut payload[..], &mut crc[..]] {
        if read_full(r, buf)? != buf.len() {
            return Err(SfmError::TruncatedFrame);
        }
    }
    Ok(Some(Frame {
        frame_type,
        flags,
        stream_id,
        seq,
        header,
        payload,
        crc: u32::from_be_bytes(crc),
    }))
}
