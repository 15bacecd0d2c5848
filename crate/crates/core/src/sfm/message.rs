use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use tempfile::TempPath;

use super::{Result, SfmError};

pub const HDR_MSG_ID: &str = "msg-id";
pub const HDR_TOPIC: &str = "topic";
pub const HDR_CONTENT_KIND: &str = "content-kind";
pub const HDR_TOTAL_SIZE: &str = "total-size";
pub const HDR_REPLY_TO: &str = "reply-to";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContentKind {
    Blob,
    File,
    Object,
}

impl ContentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ContentKind::Blob => "blob",
            ContentKind::File => "file",
            ContentKind::Object => "object",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blob" => Some(ContentKind::Blob),
            "file" => Some(ContentKind::File),
            "object" => Some(ContentKind::Object),
            _ => None,
        }
    }
}

/// A message body living on disk. Received file bodies own their spill file and delete it
/// on drop unless persisted.
pub struct FileBody {
    path: PathBuf,
    len: u64,
    temp: Option<TempPath>,
}

impl FileBody {
    pub fn open(path: impl Into<PathBuf>) -> io::Result<Self> {
        let path = path.into();
        let len = std::fs::metadata(&path)?.len();
        Ok(FileBody {
            path,
            len,
            temp: None,
        })
    }

    pub(crate) fn from_temp(temp: TempPath, len: u64) -> Self {
        FileBody {
            path: temp.to_path_buf(),
            len,
            temp: Some(temp),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn reader(&self) -> io::Result<File> {
        File::open(&self.path)
    }

    /// Moves a spilled body to `dest`; plain file bodies are copied.
    pub fn persist(self, dest: &Path) -> io::Result<()> {
        match self.temp {
            Some(temp) => match temp.persist(dest) {
                Ok(()) => Ok(()),
                Err(e) => {
                    std::fs::copy(&e.path, dest)?;
                    Ok(())
                }
            },
            None => std::fs::copy(&self.path, dest).map(|_| ()),
        }
    }
}

impl fmt::Debug for FileBody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FileBody")
            .field("path", &self.path)
            .field("len", &self.len)
            .field("spilled", &self.temp.is_some())
            .finish()
    }
}

pub enum Body {
    Bytes(Vec<u8>),
    File(FileBody),
    /// A sized byte source streamed without buffering the whole body.
    Stream {
        reader: Box<dyn Read + Send>,
        len: u64,
    },
}

impl Body {
    pub fn len(&self) -> u64 {
        match self {
            Body::Bytes(b) => b.len() as u64,
            Body::File(f) => f.len(),
            Body::Stream { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Debug for Body {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Body::Bytes(b) => write!(f, "Bytes({} bytes)", b.len()),
            Body::File(file) => file.fmt(f),
            Body::Stream { len, .. } => write!(f, "Stream({len} bytes)"),
        }
    }
}

/// A logical message: topic, string headers and a body of any length.
#[derive(Debug)]
pub struct Message {
    /// Set by the sending endpoint when left at 0 (the stream id is used).
    pub msg_id: u64,
    pub topic: String,
    pub headers: BTreeMap<String, String>,
    pub body: Body,
}

impl Message {
    fn with_kind(topic: &str, body: Body, kind: ContentKind) -> Self {
        let mut headers = BTreeMap::new();
        headers.insert(HDR_CONTENT_KIND.to_owned(), kind.as_str().to_owned());
        headers.insert(HDR_TOTAL_SIZE.to_owned(), body.len().to_string());
        Message {
            msg_id: 0,
            topic: topic.to_owned(),
            headers,
            body,
        }
    }

    pub fn blob(topic: &str, bytes: Vec<u8>) -> Self {
        Self::with_kind(topic, Body::Bytes(bytes), ContentKind::Blob)
    }

    /// A serialized object, e.g. an encoded model.
    pub fn object(topic: &str, bytes: Vec<u8>) -> Self {
        Self::with_kind(topic, Body::Bytes(bytes), ContentKind::Object)
    }

    pub fn file(topic: &str, file: FileBody) -> Self {
        Self::with_kind(topic, Body::File(file), ContentKind::File)
    }

    pub fn stream(topic: &str, reader: Box<dyn Read + Send>, len: u64, kind: ContentKind) -> Self {
        Self::with_kind(topic, Body::Stream { reader, len }, kind)
    }

    pub fn with_header(mut self, key: &str, value: impl Into<String>) -> Self {
        self.headers.insert(key.to_owned(), value.into());
        self
    }

    pub fn header(&self, key: &str) -> Option<&str> {
        self.headers.get(key).map(String::as_str)
    }

    pub fn content_kind(&self) -> ContentKind {
        self.header(HDR_CONTENT_KIND)
            .and_then(ContentKind::parse)
            .unwrap_or(ContentKind::Blob)
    }

    pub fn total_size(&self) -> u64 {
        self.body.len()
    }

    pub fn bytes(&self) -> Option<&[u8]> {
        match &self.body {
            Body::Bytes(b) => Some(b),
            _ => None,
        }
    }

    /// The body as bytes, reading it from disk or the stream source if necessary.
    pub fn into_bytes(self) -> io::Result<Vec<u8>> {
        match self.body {
            Body::Bytes(b) => Ok(b),
            Body::File(f) => std::fs::read(f.path()),
            Body::Stream { reader, len } => {
                let mut out = Vec::with_capacity(len.min(1 << 26) as usize);
                reader.take(len).read_to_end(&mut out)?;
                Ok(out)
            }
        }
    }

    /// Serializes the stream-opening header block as `key=value` lines.
    pub(crate) fn encode_hello(&self) -> Result<Vec<u8>> {
        let mut out = String::new();
        let mut line = |k: &str, v: &str| -> Result<()> {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(SfmError::InvalidHeaders(format!("bad header {k:?}={v:?}")));
            }
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
            Ok(())
        };
        line(HDR_MSG_ID, &self.msg_id.to_string())?;
        line(HDR_TOPIC, &self.topic)?;
        line(HDR_CONTENT_KIND, self.content_kind().as_str())?;
        line(HDR_TOTAL_SIZE, &self.body.len().to_string())?;
        for (k, v) in &self.headers {
            if [HDR_MSG_ID, HDR_TOPIC, HDR_CONTENT_KIND, HDR_TOTAL_SIZE].contains(&k.as_str()) {
                continue;
            }
            line(k, v)?;
        }
        Ok(out.into_bytes())
    }
}

/// Parsed stream-opening header block.
#[derive(Debug, Clone)]
pub(crate) struct Hello {
    pub msg_id: u64,
    pub topic: String,
    pub kind: ContentKind,
    pub total_size: u64,
    pub headers: BTreeMap<String, String>,
}

pub(crate) fn parse_hello(block: &[u8]) -> Result<Hello> {
    let text = std::str::from_utf8(block)
        .map_err(|_| SfmError::InvalidHeaders("header block is not UTF-8".into()))?;
    let mut headers = BTreeMap::new();
    for line in text.split_terminator('\n') {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SfmError::InvalidHeaders(format!("line without '=': {line:?}")))?;
        if k.is_empty() || headers.insert(k.to_owned(), v.to_owned()).is_some() {
            return Err(SfmError::InvalidHeaders(format!("empty or repeated key {k:?}")));
        }
    }
    let required = |key: &str| {
        headers
            .get(key)
            .cloned()
            .ok_or_else(|| SfmError::InvalidHeaders(format!("missing {key}")))
    };
    let msg_id = required(HDR_MSG_ID)?
        .parse()
        .map_err(|_| SfmError::InvalidHeaders("msg-id is not a u64".into()))?;
    let topic = required(HDR_TOPIC)?;
    let kind = ContentKind::parse(&required(HDR_CONTENT_KIND)?)
        .ok_or_else(|| SfmError::InvalidHeaders("unknown content-kind".into()))?;
    let total_size = required(HDR_TOTAL_SIZE)?
        .parse()
        .map_err(|_| SfmError::InvalidHeaders("total-size is not a u64".into()))?;
    headers.remove(HDR_MSG_ID);
    headers.remove(HDR_TOPIC);
    Ok(Hello {
        msg_id,
        topic,
        kind,
        total_size,
        headers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_round_trip() {
        let mut m = Message::object("task", vec![1, 2, 3]);
        m.msg_id = 99;
        let m = m
            .with_header("task-id", "17")
            .with_header(HDR_REPLY_TO, "server");
        let hello = parse_hello(&m.encode_hello().unwrap()).unwrap();
        assert_eq!(hello.msg_id, m.msg_id);
        assert_eq!(hello.topic, "task");
        assert_eq!(hello.kind, ContentKind::Object);
        assert_eq!(hello.total_size, 3);
        assert_eq!(hello.headers, m.headers);
    }

    #[test]
    fn header_values_cannot_break_lines() {
        let m = Message::blob("t", vec![]).with_header("k", "a\nb");
        assert!(matches!(m.encode_hello(), Err(SfmError::InvalidHeaders(_))));
        let m = Message::blob("t", vec![]).with_header("a=b", "c");
        assert!(matches!(m.encode_hello(), Err(SfmError::InvalidHeaders(_))));
    }

    #[test]
    fn malformed_hello_rejected() {
        for block in [&b"no-equals\n"[..], b"msg-id=1\n", b"\xff\xfe", b"msg-id=x\ntopic=t\ncontent-kind=blob\ntotal-size=0\n"] {
            assert!(matches!(parse_hello(block), Err(SfmError::InvalidHeaders(_))));
        }
    }
}
