//! Byte transports beneath the frame layer.
//!
//! A driver provides ordered, reliable, bidirectional byte connections. Which driver is
//! used is decided by name at configuration time; nothing above [`Connection`] depends on
//! the choice.

mod inproc;
mod tcp;

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

pub use inproc::InProcDriver;
pub use tcp::TcpDriver;

use super::{Result, SfmError};

type Shutdown = Arc<dyn Fn() + Send + Sync>;

/// One established byte connection, already split into its read and write halves.
pub struct Connection {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    shutdown: Shutdown,
    peer: String,
}

impl Connection {
    pub fn new(
        reader: Box<dyn Read + Send>,
        writer: Box<dyn Write + Send>,
        shutdown: Shutdown,
        peer: String,
    ) -> Self {
        Connection {
            reader,
            writer,
            shutdown,
            peer,
        }
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    /// A handle that tears the connection down from any thread, unblocking both halves.
    pub fn shutdown_handle(&self) -> Arc<dyn Fn() + Send + Sync> {
        self.shutdown.clone()
    }

    pub fn into_parts(self) -> (Box<dyn Read + Send>, Box<dyn Write + Send>, Shutdown) {
        (self.reader, self.writer, self.shutdown)
    }
}

impl fmt::Debug for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Connection").field("peer", &self.peer).finish()
    }
}

pub trait Acceptor: Send + Sync {
    /// Blocks for the next inbound connection; `ConnectionClosed` once the acceptor is closed.
    fn accept(&self) -> Result<Connection>;
    /// The address peers should connect to (resolves ephemeral TCP ports).
    fn local_address(&self) -> String;
    fn close(&self);
}

pub trait Driver: Send + Sync {
    fn name(&self) -> &'static str;
    fn connect(&self, address: &str) -> Result<Connection>;
    fn listen(&self, address: &str) -> Result<Box<dyn Acceptor>>;
}

pub const DRIVER_NAMES: [&str; 2] = ["inproc", "tcp"];

pub fn driver_for(name: &str) -> Result<Arc<dyn Driver>> {
    match name {
        "tcp" => Ok(Arc::new(TcpDriver)),
        "inproc" | "in-process" => Ok(Arc::new(InProcDriver)),
        other => Err(SfmError::DriverUnavailable(other.to_owned())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Listen,
    Connect,
}

pub enum Opened {
    Connection(Connection),
    Acceptor(Box<dyn Acceptor>),
}

impl Opened {
    pub fn into_connection(self) -> Option<Connection> {
        match self {
            Opened::Connection(c) => Some(c),
            Opened::Acceptor(_) => None,
        }
    }

    pub fn into_acceptor(self) -> Option<Box<dyn Acceptor>> {
        match self {
            Opened::Acceptor(a) => Some(a),
            Opened::Connection(_) => None,
        }
    }
}

pub fn open_endpoint(driver: &dyn Driver, address: &str, mode: Mode) -> Result<Opened> {
    match mode {
        Mode::Listen => driver.listen(address).map(Opened::Acceptor),
        Mode::Connect => driver.connect(address).map(Opened::Connection),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};

    fn echo_once(driver: &dyn Driver, listen_at: &str) {
        let acceptor = open_endpoint(driver, listen_at, Mode::Listen)
            .unwrap()
            .into_acceptor()
            .unwrap();
        let addr = acceptor.local_address();
        let server = std::thread::spawn(move || {
            let conn = acceptor.accept().unwrap();
            let (mut r, mut w, _) = conn.into_parts();
            let mut buf = vec![0u8; 300_000];
            r.read_exact(&mut buf).unwrap();
            w.write_all(&buf).unwrap();
            w.flush().unwrap();
        });
        let conn = driver.connect(&addr).unwrap();
        let (mut r, mut w, _) = conn.into_parts();
        let data: Vec<u8> = (0..300_000).map(|i| (i % 241) as u8).collect();
        let writer = std::thread::spawn(move || {
            w.write_all(&data).unwrap();
            w.flush().unwrap();
            w
        });
        let mut back = vec![0u8; 300_000];
        r.read_exact(&mut back).unwrap();
        let _w = writer.join().unwrap();
        server.join().unwrap();
        assert!(back.iter().enumerate().all(|(i, &b)| b == (i % 241) as u8));
    }

    #[test]
    fn both_drivers_echo() {
        echo_once(&InProcDriver, "driver-test-echo");
        echo_once(&TcpDriver, "127.0.0.1:0");
    }

    #[test]
    fn unknown_driver() {
        assert!(matches!(driver_for("grpc"), Err(SfmError::DriverUnavailable(_))));
    }

    #[test]
    fn refused_and_in_use() {
        assert!(matches!(
            InProcDriver.connect("nobody-listens-here"),
            Err(SfmError::ConnectionRefused(_))
        ));
        let a = InProcDriver.listen("driver-test-dup").unwrap();
        assert!(matches!(
            InProcDriver.listen("driver-test-dup"),
            Err(SfmError::AddressInUse(_))
        ));
        a.close();
        assert!(InProcDriver.listen("driver-test-dup").is_ok());

        let t = TcpDriver.listen("127.0.0.1:0").unwrap();
        let addr = t.local_address();
        assert!(matches!(TcpDriver.listen(&addr), Err(SfmError::AddressInUse(_))));
        t.close();
        // the port is released, so nothing answers there any more
        assert!(matches!(TcpDriver.connect(&addr), Err(SfmError::ConnectionRefused(_))));
    }

    #[test]
    fn close_unblocks_accept() {
        for (driver, addr) in [
            (Arc::new(InProcDriver) as Arc<dyn Driver>, "driver-test-close"),
            (Arc::new(TcpDriver), "127.0.0.1:0"),
        ] {
            let acceptor: Arc<dyn Acceptor> = driver.listen(addr).unwrap().into();
            let a2 = acceptor.clone();
            let t = std::thread::spawn(move || a2.accept());
            std::thread::sleep(std::time::Duration::from_millis(50));
            acceptor.close();
            assert!(matches!(t.join().unwrap(), Err(SfmError::ConnectionClosed)));
        }
    }
}
