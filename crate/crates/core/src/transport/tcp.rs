use std::collections::BTreeMap;
use std::io::{self, ErrorKind};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::{
    check_route, read_frame, write_frame, Endpoint, Envelope, Frame, Message, NonceGuard, PartyId,
    TransportError,
};

type Inbound = Result<Envelope, TransportError>;

/// Active-party side of a TCP star: one stream per passive party, each
/// drained by a reader thread into a single inbox.
pub struct TcpHub {
    writers: BTreeMap<PartyId, TcpStream>,
    inbox: Receiver<Inbound>,
    guard: NonceGuard,
}

impl TcpHub {
    /// Accepts exactly `passive` connections. Each connection is identified
    /// by the sender id of its first frame, which is delivered normally.
    pub fn accept(listener: &TcpListener, passive: usize, timeout: Duration) -> Result<Self, TransportError> {
        let deadline = Instant::now() + timeout;
        listener.set_nonblocking(true)?;
        let (tx, rx) = mpsc::channel();
        let mut writers = BTreeMap::new();
        while writers.len() < passive {
            let (stream, _) = match listener.accept() {
                Ok(conn) => conn,
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Timeout(timeout));
                    }
                    thread::sleep(Duration::from_millis(2));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            stream.set_nonblocking(false)?;
            stream.set_nodelay(true)?;
            let remaining = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
            stream.set_read_timeout(Some(remaining))?;
            let mut reader = stream.try_clone()?;
            let (frame, bytes) = match read_frame(&mut reader) {
                Ok(Ok(f)) => f,
                Ok(Err(e)) => {
                    let _ = stream.shutdown(Shutdown::Both);
                    return Err(e.into());
                }
                Err(e) => return Err(io_error(e, timeout)),
            };
            let id = frame.sender;
            if id.is_active() || id.index() > passive {
                let _ = stream.shutdown(Shutdown::Both);
                return Err(TransportError::UnknownParty(id.0));
            }
            if writers.contains_key(&id) {
                let _ = stream.shutdown(Shutdown::Both);
                return Err(TransportError::DuplicateParty(id.0));
            }
            stream.set_read_timeout(None)?;
            let _ = tx.send(Ok(Envelope {
                from: id,
                message: frame.message,
                bytes,
            }));
            spawn_reader(id, reader, tx.clone());
            writers.insert(id, stream);
        }
        listener.set_nonblocking(false)?;
        Ok(Self {
            writers,
            inbox: rx,
            guard: NonceGuard::default(),
        })
    }
}

fn spawn_reader(id: PartyId, mut stream: TcpStream, tx: Sender<Inbound>) {
    thread::spawn(move || loop {
        let item = match read_frame(&mut stream) {
            Ok(Ok((frame, bytes))) if frame.sender == id => Ok(Envelope {
                from: frame.sender,
                message: frame.message,
                bytes,
            }),
            Ok(Ok((frame, _))) => Err(TransportError::UnknownParty(frame.sender.0)),
            Ok(Err(e)) => Err(e.into()),
            // A party that hangs up after its last message is not an error
            // for the others; the inbox reports Disconnected once all are gone.
            Err(_) => {
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
        };
        let failed = item.is_err();
        if tx.send(item).is_err() || failed {
            let _ = stream.shutdown(Shutdown::Both);
            return;
        }
    });
}

impl Drop for TcpHub {
    fn drop(&mut self) {
        for s in self.writers.values() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Endpoint for TcpHub {
    fn party(&self) -> PartyId {
        PartyId::ACTIVE
    }

    fn send(&mut self, to: PartyId, message: &Message) -> Result<usize, TransportError> {
        check_route(PartyId::ACTIVE, to)?;
        let bytes = Frame {
            sender: PartyId::ACTIVE,
            message: message.clone(),
        }
        .encode()?;
        let stream = self
            .writers
            .get_mut(&to)
            .ok_or(TransportError::UnknownParty(to.0))?;
        write_frame(stream, &bytes).map_err(|_| TransportError::Disconnected)?;
        Ok(bytes.len())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Envelope, TransportError> {
        let env = self.inbox.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout(timeout),
            RecvTimeoutError::Disconnected => TransportError::Disconnected,
        })??;
        self.guard.admit(env.from, &env.message)?;
        Ok(env)
    }
}

/// Passive-party side of a TCP star.
pub struct TcpLink {
    id: PartyId,
    stream: TcpStream,
    guard: NonceGuard,
    closed: bool,
}

impl TcpLink {
    /// Dials the hub, retrying until `timeout` so passive parties may start
    /// before the active party listens.
    pub fn connect<A: ToSocketAddrs>(addr: A, id: PartyId, timeout: Duration) -> Result<Self, TransportError> {
        if id.is_active() {
            return Err(TransportError::Topology {
                from: id,
                to: PartyId::ACTIVE,
            });
        }
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let deadline = Instant::now() + timeout;
        loop {
            for a in &addrs {
                if let Ok(stream) = TcpStream::connect_timeout(a, Duration::from_millis(200)) {
                    stream.set_nodelay(true)?;
                    return Ok(Self {
                        id,
                        stream,
                        guard: NonceGuard::default(),
                        closed: false,
                    });
                }
            }
            if Instant::now() >= deadline {
                return Err(TransportError::Timeout(timeout));
            }
            thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Endpoint for TcpLink {
    fn party(&self) -> PartyId {
        self.id
    }

    fn send(&mut self, to: PartyId, message: &Message) -> Result<usize, TransportError> {
        check_route(self.id, to)?;
        if self.closed {
            return Err(TransportError::Disconnected);
        }
        let bytes = Frame {
            sender: self.id,
            message: message.clone(),
        }
        .encode()?;
        write_frame(&mut self.stream, &bytes).map_err(|_| TransportError::Disconnected)?;
        Ok(bytes.len())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Envelope, TransportError> {
        if self.closed {
            return Err(TransportError::Disconnected);
        }
        self.stream.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        let (frame, bytes) = match read_frame(&mut self.stream) {
            Ok(Ok(f)) => f,
            Ok(Err(e)) => {
                self.closed = true;
                let _ = self.stream.shutdown(Shutdown::Both);
                return Err(e.into());
            }
            Err(e) => return Err(io_error(e, timeout)),
        };
        if !frame.sender.is_active() {
            return Err(TransportError::UnknownParty(frame.sender.0));
        }
        self.guard.admit(frame.sender, &frame.message)?;
        Ok(Envelope {
            from: frame.sender,
            message: frame.message,
            bytes,
        })
    }
}

fn io_error(e: io::Error, timeout: Duration) -> TransportError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => TransportError::Timeout(timeout),
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::BrokenPipe => {
            TransportError::Disconnected
        }
        _ => TransportError::Io(e),
    }
}
