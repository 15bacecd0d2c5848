use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde_json::{json, Value};

use super::Result;
use crate::model::{encode_model_to, FLModel};

pub const LATEST_MARKER: &str = "latest.txt";
pub const BEST_MARKER: &str = "best.txt";

pub fn checkpoint_name(round: u32) -> String {
    format!("round_{round}.flm")
}

/// Writes `round_<round>.flm` atomically and points `latest.txt` at it.
pub fn save_model(model: &FLModel, dir: &Path, round: u32) -> Result<PathBuf> {
    save_model_with(model, dir, round, || Ok(()))
}

/// As [`save_model`], calling `before_rename` once the temp file is complete. An error from
/// the hook aborts the save and leaves no checkpoint behind.
pub fn save_model_with(
    model: &FLModel,
    dir: &Path,
    round: u32,
    before_rename: impl FnOnce() -> io::Result<()>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let name = checkpoint_name(round);
    let mut tmp = tempfile::Builder::new()
        .prefix(&format!(".{name}."))
        .suffix(".tmp")
        .tempfile_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        encode_model_to(model, &mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    before_rename()?;
    let path = dir.join(&name);
    tmp.persist(&path).map_err(|e| e.error)?;
    write_marker(dir, LATEST_MARKER, &name)?;
    Ok(path)
}

/// Atomically replaces a marker file with `target`.
pub fn write_marker(dir: &Path, marker: &str, target: &str) -> io::Result<()> {
    let mut tmp = tempfile::Builder::new()
        .prefix(&format!(".{marker}."))
        .tempfile_in(dir)?;
    writeln!(tmp, "{target}")?;
    tmp.persist(dir.join(marker)).map_err(|e| e.error)?;
    Ok(())
}

/// The checkpoint file name a marker points at.
pub fn read_marker(dir: &Path, marker: &str) -> io::Result<String> {
    Ok(fs::read_to_string(dir.join(marker))?.trim().to_owned())
}

/// Newline-delimited JSON events. Each line gets an `event` name and `elapsed_ms`.
pub struct EventLog {
    out: Mutex<Option<File>>,
    started: Instant,
}

impl EventLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        Ok(EventLog {
            out: Mutex::new(Some(file)),
            started: Instant::now(),
        })
    }

    /// A log that discards everything.
    pub fn disabled() -> Self {
        EventLog {
            out: Mutex::new(None),
            started: Instant::now(),
        }
    }

    pub fn emit(&self, event: &str, fields: Value) {
        let mut guard = self.out.lock().unwrap();
        let Some(file) = guard.as_mut() else { return };
        let mut line = json!({
            "event": event,
            "elapsed_ms": self.started.elapsed().as_millis() as u64,
        });
        if let (Value::Object(dst), Value::Object(src)) = (&mut line, fields) {
            dst.extend(src);
        }
        if let Err(e) = writeln!(file, "{line}") {
            tracing::warn!(error = %e, "event log write failed");
        }
    }
}
