use std::io;
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::{Acceptor, Connection, Driver};
use crate::sfm::{Result, SfmError};

/// Plain TCP stream sockets. Addresses are `host:port`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TcpDriver;

fn wrap(stream: TcpStream) -> Result<Connection> {
    stream.set_nodelay(true)?;
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "?".into());
    let reader = stream.try_clone()?;
    let control = stream.try_clone()?;
    Ok(Connection::new(
        Box::new(reader),
        Box::new(stream),
        Arc::new(move || {
            let _ = control.shutdown(Shutdown::Both);
        }),
        peer,
    ))
}

impl Driver for TcpDriver {
    fn name(&self) -> &'static str {
        "tcp"
    }

    fn connect(&self, address: &str) -> Result<Connection> {
        let addrs: Vec<_> = address
            .to_socket_addrs()
            .map_err(|_| SfmError::ConnectionRefused(address.to_owned()))?
            .collect();
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect(addr) {
                Ok(stream) => return wrap(stream),
                Err(e) => last = Some(e),
            }
        }
        Err(match last {
            Some(e) if e.kind() != io::ErrorKind::ConnectionRefused => SfmError::Io(e),
            _ => SfmError::ConnectionRefused(address.to_owned()),
        })
    }

    fn listen(&self, address: &str) -> Result<Box<dyn Acceptor>> {
        let listener = TcpListener::bind(address).map_err(|e| match e.kind() {
            io::ErrorKind::AddrInUse => SfmError::AddressInUse(address.to_owned()),
            _ => SfmError::Io(e),
        })?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        Ok(Box::new(TcpAcceptor {
            listener: Mutex::new(Some(listener)),
            local: local.to_string(),
        }))
    }
}

const ACCEPT_POLL: Duration = Duration::from_millis(5);

/// Polls a non-blocking listener so that `close` can release the port while another
/// thread is waiting in `accept`.
struct TcpAcceptor {
    listener: Mutex<Option<TcpListener>>,
    local: String,
}

impl Acceptor for TcpAcceptor {
    fn accept(&self) -> Result<Connection> {
        loop {
            let attempt = {
                let guard = self.listener.lock().unwrap();
                let Some(listener) = guard.as_ref() else {
                    return Err(SfmError::ConnectionClosed);
                };
                listener.accept()
            };
            match attempt {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    return wrap(stream);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(SfmError::Io(e)),
            }
        }
    }

    fn local_address(&self) -> String {
        self.local.clone()
    }

    fn close(&self) {
        self.listener.lock().unwrap().take();
    }
}
