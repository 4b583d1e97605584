//! Point-to-point links between the root and each worker.
//!
//! Two transports implement [`Link`]: in-process channels carrying encoded
//! frames, and TCP streams.

use std::io;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::Envelope;
use crate::error::{Error, Result};

/// A bidirectional, ordered frame channel to one peer.
pub trait Link: Send {
    fn send(&mut self, envelope: &Envelope) -> Result<()>;

    /// Blocks for the next frame. `None` waits indefinitely.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Envelope>;

    fn close(&mut self);
}

/// Accepts incoming links on the root.
pub trait Listener: Send {
    fn accept(&mut self, deadline: Instant) -> Result<Box<dyn Link>>;
}

fn disconnected(what: impl std::fmt::Display) -> Error {
    Error::Comm {
        rank: None,
        message: format!("peer disconnected: {what}"),
    }
}

/// One end of an in-process link. Frames cross the channel encoded, so
/// framing is exercised exactly as on a socket.
pub struct InProcLink {
    tx: Option<Sender<Vec<u8>>>,
    rx: Receiver<Vec<u8>>,
}

impl InProcLink {
    pub fn pair() -> (InProcLink, InProcLink) {
        let (a_tx, b_rx) = mpsc::channel();
        let (b_tx, a_rx) = mpsc::channel();
        (
            InProcLink {
                tx: Some(a_tx),
                rx: a_rx,
            },
            InProcLink {
                tx: Some(b_tx),
                rx: b_rx,
            },
        )
    }
}

impl Link for InProcLink {
    fn send(&mut self, envelope: &Envelope) -> Result<()> {
        let bytes = envelope.encode()?;
        self.tx
            .as_ref()
            .ok_or(Error::Closed)?
            .send(bytes)
            .map_err(|_| disconnected("in-process channel closed"))
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Envelope> {
        let bytes = match timeout {
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => Error::Timeout(format!("no message within {t:?}")),
                RecvTimeoutError::Disconnected => disconnected("in-process channel closed"),
            })?,
            None => self
                .rx
                .recv()
                .map_err(|_| disconnected("in-process channel closed"))?,
        };
        let (envelope, used) = Envelope::decode(&bytes)?;
        if used != bytes.len() {
            return Err(Error::Protocol("trailing bytes after frame".into()));
        }
        Ok(envelope)
    }

    fn close(&mut self) {
        self.tx = None;
    }
}

/// A rendezvous point for in-process environments, the analogue of a TCP
/// listen address. Clones share the same rendezvous.
#[derive(Clone)]
pub struct InProcAddress {
    pending: Sender<InProcLink>,
    listener: Arc<Mutex<Option<Receiver<InProcLink>>>>,
}

impl Default for InProcAddress {
    fn default() -> Self {
        Self::new()
    }
}

impl InProcAddress {
    pub fn new() -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            pending: tx,
            listener: Arc::new(Mutex::new(Some(rx))),
        }
    }

    /// Claims the listening side. Only one root may listen on an address.
    pub fn listen(&self) -> Result<InProcListener> {
        let rx = self
            .listener
            .lock()
            .expect("listener lock")
            .take()
            .ok_or_else(|| Error::Config("in-process address already has a listener".into()))?;
        Ok(InProcListener { pending: rx })
    }

    pub fn connect(&self) -> Result<InProcLink> {
        let (ours, theirs) = InProcLink::pair();
        self.pending
            .send(theirs)
            .map_err(|_| disconnected("in-process listener gone"))?;
        Ok(ours)
    }
}

impl std::fmt::Debug for InProcAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("InProcAddress")
    }
}

pub struct InProcListener {
    pending: Receiver<InProcLink>,
}

impl Listener for InProcListener {
    fn accept(&mut self, deadline: Instant) -> Result<Box<dyn Link>> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.pending.recv_timeout(wait) {
            Ok(link) => Ok(Box::new(link)),
            Err(_) => Err(Error::Timeout("waiting for peers to join".into())),
        }
    }
}

pub struct TcpLink {
    stream: Option<TcpStream>,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_nonblocking(false)?;
        Ok(Self {
            stream: Some(stream),
        })
    }

    /// Connects to `address`, retrying until `deadline`.
    pub fn connect(address: &str, deadline: Instant) -> Result<Self> {
        let addrs: Vec<_> = address
            .to_socket_addrs()
            .map_err(|e| Error::Config(format!("bad address `{address}`: {e}")))?
            .collect();
        loop {
            let mut last = None;
            for a in &addrs {
                let wait = deadline
                    .saturating_duration_since(Instant::now())
                    .max(Duration::from_millis(10));
                match TcpStream::connect_timeout(a, wait) {
                    Ok(s) => return Self::new(s),
                    Err(e) => last = Some(e),
                }
            }
            if Instant::now() >= deadline {
                return Err(Error::Timeout(format!(
                    "could not reach {address}: {}",
                    last.map(|e| e.to_string()).unwrap_or_default()
                )));
            }
            thread::sleep(Duration::from_millis(50));
        }
    }

    fn stream(&mut self) -> Result<&mut TcpStream> {
        self.stream.as_mut().ok_or(Error::Closed)
    }
}

impl Link for TcpLink {
    fn send(&mut self, envelope: &Envelope) -> Result<()> {
        envelope
            .write_to(self.stream()?)
            .map_err(disconnected)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Envelope> {
        let stream = self.stream()?;
        stream.set_read_timeout(timeout.map(|t| t.max(Duration::from_millis(1))))?;
        match Envelope::read_from(stream) {
            Ok(frame) => frame,
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                Err(Error::Timeout(format!("no message within {timeout:?}")))
            }
            Err(e) => Err(disconnected(e)),
        }
    }

    fn close(&mut self) {
        if let Some(s) = self.stream.take() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }
}

pub struct TcpListenerLink {
    listener: TcpListener,
}

impl TcpListenerLink {
    pub fn bind(address: &str) -> Result<Self> {
        let listener = TcpListener::bind(address)
            .map_err(|e| Error::Config(format!("cannot listen on `{address}`: {e}")))?;
        Ok(Self { listener })
    }

    pub fn from_listener(listener: TcpListener) -> Self {
        Self { listener }
    }

    pub fn local_addr(&self) -> Result<String> {
        Ok(self.listener.local_addr()?.to_string())
    }
}

impl Listener for TcpListenerLink {
    fn accept(&mut self, deadline: Instant) -> Result<Box<dyn Link>> {
        self.listener.set_nonblocking(true)?;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => return Ok(Box::new(TcpLink::new(stream)?)),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(Error::Timeout("waiting for peers to join".into()));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}
