//! Application messages exchanged between server and clients over SFM.
//!
//! | topic            | direction       | headers                                          | body        |
//! |------------------|-----------------|--------------------------------------------------|-------------|
//! | `register`       | client → server | `client-name`                                    | empty       |
//! | `register-reply` | server → client | `status` (`ok` / `duplicate-name`), `job-id`     | empty       |
//! | `task`           | server → client | `task-id`, `task-name`, `round`, `total-rounds`, `job-id` | FLM1 model |
//! | `result`         | client → server | `task-id`, `client-name`, `status` (`OK` / `FAILED`), `reason` | FLM1 model when OK |
//! | `job-end`        | server → client | `job-id`                                         | empty       |

use std::io::{self, Read};
use std::sync::Arc;

use crate::sfm::{ContentKind, Message};

pub const TOPIC_REGISTER: &str = "register";
pub const TOPIC_REGISTER_REPLY: &str = "register-reply";
pub const TOPIC_TASK: &str = "task";
pub const TOPIC_RESULT: &str = "result";
pub const TOPIC_JOB_END: &str = "job-end";

pub const HDR_CLIENT_NAME: &str = "client-name";
pub const HDR_STATUS: &str = "status";
pub const HDR_JOB_ID: &str = "job-id";
pub const HDR_TASK_ID: &str = "task-id";
pub const HDR_TASK_NAME: &str = "task-name";
pub const HDR_ROUND: &str = "round";
pub const HDR_TOTAL_ROUNDS: &str = "total-rounds";
pub const HDR_REASON: &str = "reason";

pub const REGISTER_OK: &str = "ok";
pub const REGISTER_DUPLICATE: &str = "duplicate-name";

pub const TASK_TRAIN: &str = "train";
pub const TASK_VALIDATE: &str = "validate";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskStatus {
    Ok,
    Failed,
    Timeout,
}

impl TaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Ok => "OK",
            TaskStatus::Failed => "FAILED",
            TaskStatus::Timeout => "TIMEOUT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "OK" => Some(TaskStatus::Ok),
            "FAILED" => Some(TaskStatus::Failed),
            "TIMEOUT" => Some(TaskStatus::Timeout),
            _ => None,
        }
    }
}

/// A reader over shared bytes, so one encoded model can be streamed to many peers.
pub struct SharedReader {
    bytes: Arc<Vec<u8>>,
    pos: usize,
}

impl SharedReader {
    pub fn new(bytes: Arc<Vec<u8>>) -> Self {
        SharedReader { bytes, pos: 0 }
    }
}

impl Read for SharedReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        let rest = &self.bytes[self.pos..];
        let n = rest.len().min(out.len());
        out[..n].copy_from_slice(&rest[..n]);
        self.pos += n;
        Ok(n)
    }
}

/// An `object` message whose body is the shared encoded model.
pub fn shared_object(topic: &str, bytes: &Arc<Vec<u8>>) -> Message {
    let len = bytes.len() as u64;
    Message::stream(
        topic,
        Box::new(SharedReader::new(bytes.clone())),
        len,
        ContentKind::Object,
    )
}
