use std::collections::{HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, LazyLock, Mutex};

use super::{Acceptor, Connection, Driver};
use crate::sfm::{Result, SfmError};

/// Bytes a pipe holds before writers block.
const PIPE_CAPACITY: usize = 2 * 1024 * 1024;

static REGISTRY: LazyLock<Mutex<HashMap<String, Sender<Connection>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

/// Connections between endpoints of one process, addressed by registry key.
#[derive(Debug, Clone, Copy, Default)]
pub struct InProcDriver;

impl Driver for InProcDriver {
    fn name(&self) -> &'static str {
        "inproc"
    }

    fn connect(&self, address: &str) -> Result<Connection> {
        let tx = REGISTRY
            .lock()
            .unwrap()
            .get(address)
            .cloned()
            .ok_or_else(|| SfmError::ConnectionRefused(address.to_owned()))?;
        let (client, server) = pair(address);
        tx.send(server)
            .map_err(|_| SfmError::ConnectionRefused(address.to_owned()))?;
        Ok(client)
    }

    fn listen(&self, address: &str) -> Result<Box<dyn Acceptor>> {
        let mut registry = REGISTRY.lock().unwrap();
        if registry.contains_key(address) {
            return Err(SfmError::AddressInUse(address.to_owned()));
        }
        let (tx, rx) = mpsc::channel();
        registry.insert(address.to_owned(), tx);
        Ok(Box::new(InProcAcceptor {
            key: address.to_owned(),
            incoming: Mutex::new(rx),
            closed: Mutex::new(false),
        }))
    }
}

struct InProcAcceptor {
    key: String,
    incoming: Mutex<Receiver<Connection>>,
    closed: Mutex<bool>,
}

impl Acceptor for InProcAcceptor {
    fn accept(&self) -> Result<Connection> {
        self.incoming
            .lock()
            .unwrap()
            .recv()
            .map_err(|_| SfmError::ConnectionClosed)
    }

    fn local_address(&self) -> String {
        self.key.clone()
    }

    fn close(&self) {
        let mut closed = self.closed.lock().unwrap();
        if !*closed {
            *closed = true;
            // dropping the registry's sender ends any blocked accept()
            REGISTRY.lock().unwrap().remove(&self.key);
        }
    }
}

impl Drop for InProcAcceptor {
    fn drop(&mut self) {
        self.close();
    }
}

#[derive(Default)]
struct PipeState {
    buf: VecDeque<u8>,
    closed: bool,
}

/// One direction of an in-process connection: a bounded byte queue.
#[derive(Default)]
struct Pipe {
    state: Mutex<PipeState>,
    readable: Condvar,
    writable: Condvar,
}

impl Pipe {
    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.readable.notify_all();
        self.writable.notify_all();
    }
}

struct PipeReader(Arc<Pipe>);
struct PipeWriter(Arc<Pipe>);

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        let mut state = self.0.state.lock().unwrap();
        while state.buf.is_empty() {
            if state.closed {
                return Ok(0);
            }
            state = self.0.readable.wait(state).unwrap();
        }
        let n = out.len().min(state.buf.len());
        let (front, back) = state.buf.as_slices();
        let from_front = n.min(front.len());
        out[..from_front].copy_from_slice(&front[..from_front]);
        out[from_front..n].copy_from_slice(&back[..n - from_front]);
        state.buf.drain(..n);
        drop(state);
        self.0.writable.notify_all();
        Ok(n)
    }
}

impl Write for PipeWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        if data.is_empty() {
            return Ok(0);
        }
        let mut state = self.0.state.lock().unwrap();
        loop {
            if state.closed {
                return Err(io::ErrorKind::BrokenPipe.into());
            }
            if state.buf.len() < PIPE_CAPACITY {
                break;
            }
            state = self.0.writable.wait(state).unwrap();
        }
        let n = data.len().min(PIPE_CAPACITY - state.buf.len());
        state.buf.extend(&data[..n]);
        drop(state);
        self.0.readable.notify_all();
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for PipeReader {
    fn drop(&mut self) {
        self.0.close();
    }
}

impl Drop for PipeWriter {
    fn drop(&mut self) {
        self.0.close();
    }
}

fn pair(address: &str) -> (Connection, Connection) {
    let up = Arc::new(Pipe::default());
    let down = Arc::new(Pipe::default());
    let side = |rx: &Arc<Pipe>, tx: &Arc<Pipe>, peer: String| {
        let (a, b) = (rx.clone(), tx.clone());
        Connection::new(
            Box::new(PipeReader(rx.clone())),
            Box::new(PipeWriter(tx.clone())),
            Arc::new(move || {
                a.close();
                b.close();
            }),
            peer,
        )
    };
    let client = side(&down, &up, address.to_owned());
    let server = side(&up, &down, format!("{address}#client"));
    (client, server)
}
