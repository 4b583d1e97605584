//! Environments: rank setup, star-topology collectives, rank-ordered
//! logging and teardown over a pluggable transport.
//!
//! Rank 0 is the root. Every worker holds a single link to the root, and all
//! collectives are routed through it. Reductions sum contributions in rank
//! order, so every rank receives bitwise-identical results.

pub mod transport;
pub mod wire;

use std::io::Write;
use std::thread;
use std::time::{Duration, Instant};

use transport::{InProcAddress, Link, Listener, TcpLink, TcpListenerLink};
use wire::{
    check_hello, decode_byte_list, decode_f64s, encode_byte_list, encode_f64s, hello_payload,
    Envelope, MsgType, PROTOCOL_VERSION,
};

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const TIMEOUT_ENV: &str = "NASF_TIMEOUT_SECS";
pub const MASTER_ENV: &str = "NASF_MASTER";

/// Collective timeout from `NASF_TIMEOUT_SECS`, or 30 s.
pub fn default_timeout() -> Duration {
    std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|s| *s > 0.0)
        .map(Duration::from_secs_f64)
        .unwrap_or(DEFAULT_TIMEOUT)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Master,
    Worker,
}

#[derive(Debug, Clone)]
pub enum Address {
    /// `host:port`
    Tcp(String),
    InProc(InProcAddress),
}

#[derive(Debug, Clone)]
pub struct InitConfig {
    pub role: Role,
    pub master_address: Address,
    pub expected_world_size: usize,
    pub timeout: Duration,
}

impl InitConfig {
    pub fn new(role: Role, master_address: Address, expected_world_size: usize) -> Self {
        Self {
            role,
            master_address,
            expected_world_size,
            timeout: default_timeout(),
        }
    }
}

/// Joins (or, as root, forms) an environment. Returns once every expected
/// peer has joined and received its rank.
pub fn init(config: InitConfig) -> Result<Environment> {
    let deadline = Instant::now() + config.timeout;
    match config.role {
        Role::Master => {
            if config.expected_world_size == 1 {
                return Ok(Environment::solo());
            }
            let mut listener: Box<dyn Listener> = match &config.master_address {
                Address::Tcp(addr) => Box::new(TcpListenerLink::bind(addr)?),
                Address::InProc(addr) => Box::new(addr.listen()?),
            };
            init_master(
                listener.as_mut(),
                config.expected_world_size,
                config.timeout,
            )
        }
        Role::Worker => {
            let link: Box<dyn Link> = match &config.master_address {
                Address::Tcp(addr) => Box::new(TcpLink::connect(addr, deadline)?),
                Address::InProc(addr) => Box::new(addr.connect()?),
            };
            init_worker(link, config.timeout)
        }
    }
}

/// Root side of [`init`] on an already-bound listener. Ranks are assigned in
/// connection-acceptance order once all `world_size - 1` workers have said
/// HELLO.
pub fn init_master(
    listener: &mut dyn Listener,
    world_size: usize,
    timeout: Duration,
) -> Result<Environment> {
    if world_size == 0 {
        return Err(Error::Config("world size must be >= 1".into()));
    }
    let deadline = Instant::now() + timeout;
    let mut links: Vec<Box<dyn Link>> = Vec::with_capacity(world_size - 1);
    for _ in 1..world_size {
        let mut link = listener.accept(deadline)?;
        let wait = deadline.saturating_duration_since(Instant::now());
        let hello = link.recv(Some(wait.max(Duration::from_millis(1))))?;
        let verdict = if hello.msg_type == MsgType::Hello {
            check_hello(&hello.payload)
        } else {
            Err(Error::Protocol(format!(
                "expected HELLO, got {:?}",
                hello.msg_type
            )))
        };
        if let Err(e) = verdict {
            let _ = link.send(&Envelope::new(
                MsgType::Shutdown,
                0,
                e.to_string().into_bytes(),
            ));
            link.close();
            for mut l in links {
                l.close();
            }
            return Err(e);
        }
        links.push(link);
    }
    let mut peers: Vec<Option<Box<dyn Link>>> = vec![None];
    for (i, mut link) in links.into_iter().enumerate() {
        let rank = i + 1;
        let mut payload = (rank as u32).to_be_bytes().to_vec();
        payload.extend_from_slice(&(world_size as u32).to_be_bytes());
        link.send(&Envelope::new(MsgType::RankAssign, 0, payload))
            .map_err(|e| with_rank(e, rank))?;
        peers.push(Some(link));
    }
    Ok(Environment::with_peers(0, world_size, peers, timeout))
}

/// Worker side of [`init`] on an already-connected link.
pub fn init_worker(link: Box<dyn Link>, timeout: Duration) -> Result<Environment> {
    init_worker_with_version(link, timeout, PROTOCOL_VERSION)
}

#[doc(hidden)]
pub fn init_worker_with_version(
    mut link: Box<dyn Link>,
    timeout: Duration,
    version: u8,
) -> Result<Environment> {
    link.send(&Envelope::new(MsgType::Hello, 0, hello_payload(version)))
        .map_err(|e| with_rank(e, 0))?;
    // The root only assigns ranks once everyone has joined, which can take
    // up to its own init timeout.
    let reply = link.recv(Some(timeout)).map_err(|e| with_rank(e, 0))?;
    match reply.msg_type {
        MsgType::RankAssign if reply.payload.len() == 8 => {
            let rank = u32::from_be_bytes(reply.payload[..4].try_into().expect("sized")) as usize;
            let world = u32::from_be_bytes(reply.payload[4..].try_into().expect("sized")) as usize;
            if rank == 0 || rank >= world {
                return Err(Error::Protocol(format!(
                    "assigned rank {rank} in a world of {world}"
                )));
            }
            Ok(Environment::with_peers(
                rank,
                world,
                vec![Some(link)],
                timeout,
            ))
        }
        MsgType::Shutdown => Err(Error::Protocol(format!(
            "rejected by root: {}",
            String::from_utf8_lossy(&reply.payload)
        ))),
        other => Err(Error::Protocol(format!(
            "expected RANK_ASSIGN, got {other:?}"
        ))),
    }
}

/// Builds a full in-process environment of `world_size` ranks, indexed by
/// rank. Each environment can then move to its own thread.
pub fn in_process_group(world_size: usize, timeout: Duration) -> Result<Vec<Environment>> {
    let address = InProcAddress::new();
    let mut listener = address.listen()?;
    spawn_group(
        world_size,
        move || init_master(&mut listener, world_size, timeout),
        |_| Ok(Box::new(address.connect()?) as Box<dyn Link>),
        timeout,
    )
}

/// Like [`in_process_group`] but over loopback TCP sockets.
pub fn tcp_group(world_size: usize, timeout: Duration) -> Result<Vec<Environment>> {
    let mut listener = TcpListenerLink::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let deadline = Instant::now() + timeout;
    spawn_group(
        world_size,
        move || init_master(&mut listener, world_size, timeout),
        move |_| Ok(Box::new(TcpLink::connect(&addr, deadline)?) as Box<dyn Link>),
        timeout,
    )
}

fn spawn_group(
    world_size: usize,
    master: impl FnOnce() -> Result<Environment>,
    connect: impl Fn(usize) -> Result<Box<dyn Link>>,
    timeout: Duration,
) -> Result<Vec<Environment>> {
    let mut handles = Vec::new();
    for i in 1..world_size {
        let link = connect(i)?;
        handles.push(thread::spawn(move || init_worker(link, timeout)));
    }
    let root = master()?;
    let mut envs = vec![root];
    for h in handles {
        envs.push(
            h.join()
                .map_err(|_| Error::Usage("worker init panicked".into()))??,
        );
    }
    envs.sort_by_key(Environment::rank);
    Ok(envs)
}

fn with_rank(e: Error, rank: usize) -> Error {
    match e {
        Error::Comm {
            rank: None,
            message,
        } => Error::Comm {
            rank: Some(rank),
            message,
        },
        Error::Timeout(m) => Error::Timeout(format!("rank {rank}: {m}")),
        other => other,
    }
}

const STATUS_OK: u8 = 0;
const STATUS_ERR: u8 = 1;

fn ok_reply(body: &[u8]) -> Vec<u8> {
    let mut p = Vec::with_capacity(body.len() + 1);
    p.push(STATUS_OK);
    p.extend_from_slice(body);
    p
}

fn err_reply(message: &str) -> Vec<u8> {
    let mut p = vec![STATUS_ERR];
    p.extend_from_slice(message.as_bytes());
    p
}

fn open_reply(payload: Vec<u8>) -> Result<Vec<u8>> {
    match payload.first() {
        Some(&STATUS_OK) => Ok(payload[1..].to_vec()),
        Some(&STATUS_ERR) => Err(Error::Protocol(
            String::from_utf8_lossy(&payload[1..]).into_owned(),
        )),
        _ => Err(Error::Protocol("malformed collective reply".into())),
    }
}

/// One process's view of the distributed setting.
///
/// Not shareable across threads concurrently; callers serialize access.
pub struct Environment {
    rank: usize,
    world_size: usize,
    /// On the root, indexed by rank (slot 0 empty). On a worker, slot 0 is
    /// the link to the root.
    peers: Vec<Option<Box<dyn Link>>>,
    timeout: Duration,
    open: bool,
    tag: u32,
    log_buffer: Vec<String>,
    sink: Box<dyn Write + Send>,
}

impl std::fmt::Debug for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment")
            .field("rank", &self.rank)
            .field("world_size", &self.world_size)
            .field("open", &self.open)
            .finish()
    }
}

impl Environment {
    /// A single-rank environment. Every collective is the identity.
    pub fn solo() -> Self {
        Self::with_peers(0, 1, vec![None], DEFAULT_TIMEOUT)
    }

    fn with_peers(
        rank: usize,
        world_size: usize,
        peers: Vec<Option<Box<dyn Link>>>,
        timeout: Duration,
    ) -> Self {
        Self {
            rank,
            world_size,
            peers,
            timeout,
            open: true,
            tag: 0,
            log_buffer: Vec::new(),
            sink: Box::new(std::io::stdout()),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    /// Where the root writes rank-ordered log lines. Defaults to stdout.
    pub fn set_log_sink(&mut self, sink: Box<dyn Write + Send>) {
        self.sink = sink;
    }

    /// Returns once every rank has entered the barrier: workers report to
    /// the root, which releases them after hearing from all.
    pub fn barrier(&mut self) -> Result<()> {
        self.ensure_open()?;
        let tag = self.next_tag();
        if self.world_size == 1 {
            return Ok(());
        }
        self.guard(|env| {
            if env.is_root() {
                for r in 1..env.world_size {
                    env.recv_expect(r, MsgType::Barrier, tag)?;
                }
                env.send_all(MsgType::Barrier, tag, &ok_reply(&[]))
            } else {
                env.send_to(0, MsgType::Barrier, tag, Vec::new())?;
                open_reply(env.recv_expect(0, MsgType::Barrier, tag)?).map(|_| ())
            }
        })
    }

    /// Every rank returns the root's `values`. Non-root ranks pass a vector
    /// of the expected length; a different length is a protocol error.
    pub fn broadcast(&mut self, values: &[f64], root: usize) -> Result<Vec<f64>> {
        self.ensure_open()?;
        self.check_rank(root)?;
        let tag = self.next_tag();
        if self.world_size == 1 {
            return Ok(values.to_vec());
        }
        let result = self.guard(|env| {
            if env.is_root() {
                let data = if root == 0 {
                    encode_f64s(values)
                } else {
                    env.recv_expect(root, MsgType::Bcast, tag)?
                };
                let reply = ok_reply(&data);
                for r in 1..env.world_size {
                    if r != root {
                        env.send_to(r, MsgType::Bcast, tag, reply.clone())?;
                    }
                }
                decode_f64s(&data)
            } else if env.rank == root {
                env.send_to(0, MsgType::Bcast, tag, encode_f64s(values))?;
                Ok(values.to_vec())
            } else {
                decode_f64s(&open_reply(env.recv_expect(0, MsgType::Bcast, tag)?)?)
            }
        })?;
        if result.len() != values.len() {
            return Err(Error::Protocol(format!(
                "broadcast carried {} values, rank {} expected {}",
                result.len(),
                self.rank,
                values.len()
            )));
        }
        Ok(result)
    }

    /// Element-wise mean across ranks. The root adds contributions in rank
    /// order 0, 1, 2, ... and then divides, so all ranks get identical bits.
    pub fn allreduce_mean(&mut self, values: &[f64]) -> Result<Vec<f64>> {
        self.ensure_open()?;
        let tag = self.next_tag();
        if self.world_size == 1 {
            return Ok(values.to_vec());
        }
        let reply = self.guard(|env| {
            if env.is_root() {
                let mut sum = values.to_vec();
                let mut problem = None;
                for r in 1..env.world_size {
                    let contribution =
                        decode_f64s(&env.recv_expect(r, MsgType::Allreduce, tag)?)?;
                    if contribution.len() != sum.len() {
                        problem.get_or_insert(format!(
                            "allreduce length mismatch: rank 0 has {}, rank {r} has {}",
                            sum.len(),
                            contribution.len()
                        ));
                        continue;
                    }
                    for (s, c) in sum.iter_mut().zip(&contribution) {
                        *s += c;
                    }
                }
                if let Some(message) = problem {
                    env.send_all(MsgType::Allreduce, tag, &err_reply(&message))?;
                    return Err(Error::Protocol(message));
                }
                let world = env.world_size as f64;
                for s in &mut sum {
                    *s /= world;
                }
                env.send_all(MsgType::Allreduce, tag, &ok_reply(&encode_f64s(&sum)))?;
                Ok(sum)
            } else {
                env.send_to(0, MsgType::Allreduce, tag, encode_f64s(values))?;
                decode_f64s(&open_reply(env.recv_expect(0, MsgType::Allreduce, tag)?)?)
            }
        })?;
        Ok(reply)
    }

    /// Collects one payload per rank at `root`, indexed by rank. Other ranks
    /// get an empty list.
    pub fn gather_bytes(&mut self, payload: &[u8], root: usize) -> Result<Vec<Vec<u8>>> {
        self.ensure_open()?;
        self.check_rank(root)?;
        let tag = self.next_tag();
        if self.world_size == 1 {
            return Ok(vec![payload.to_vec()]);
        }
        self.guard(|env| {
            if env.is_root() {
                let mut all = vec![payload.to_vec()];
                for r in 1..env.world_size {
                    all.push(env.recv_expect(r, MsgType::Gather, tag)?);
                }
                if root == 0 {
                    Ok(all)
                } else {
                    env.send_to(root, MsgType::Gather, tag, encode_byte_list(&all))?;
                    Ok(Vec::new())
                }
            } else {
                env.send_to(0, MsgType::Gather, tag, payload.to_vec())?;
                if env.rank == root {
                    decode_byte_list(&env.recv_expect(0, MsgType::Gather, tag)?)
                } else {
                    Ok(Vec::new())
                }
            }
        })
    }

    /// Collective: checks that every rank holds the same `value`. Returns the
    /// lowest disagreeing rank, the same answer on every rank.
    pub fn find_disagreement(&mut self, value: u64) -> Result<Option<usize>> {
        let all = self.gather_bytes(&value.to_be_bytes(), 0)?;
        let verdict = all
            .iter()
            .position(|v| v.as_slice() != value.to_be_bytes())
            .map_or(-1.0, |r| r as f64);
        let verdict = self.broadcast(&[verdict], 0)?[0];
        Ok((verdict >= 0.0).then_some(verdict as usize))
    }

    /// Queues a line for the next [`Environment::flush_log`].
    pub fn log(&mut self, line: impl Into<String>) {
        self.log_buffer.push(line.into());
    }

    /// Collective: routes every rank's queued lines to the root, which
    /// writes them grouped by ascending rank, each prefixed `[rank r] `.
    pub fn flush_log(&mut self) -> Result<()> {
        self.ensure_open()?;
        let lines = std::mem::take(&mut self.log_buffer);
        let payload = encode_byte_list(
            &lines
                .into_iter()
                .map(String::into_bytes)
                .collect::<Vec<_>>(),
        );
        let tag = self.next_tag();
        let gathered = if self.world_size == 1 {
            vec![payload]
        } else {
            self.guard(|env| {
                if env.is_root() {
                    let mut all = vec![payload];
                    for r in 1..env.world_size {
                        all.push(env.recv_expect(r, MsgType::Log, tag)?);
                    }
                    Ok(all)
                } else {
                    env.send_to(0, MsgType::Log, tag, payload)?;
                    Ok(Vec::new())
                }
            })?
        };
        for (rank, block) in gathered.iter().enumerate() {
            for line in decode_byte_list(block)? {
                writeln!(
                    self.sink,
                    "[rank {rank}] {}",
                    String::from_utf8_lossy(&line)
                )?;
            }
        }
        self.sink.flush()?;
        Ok(())
    }

    /// Collective: each rank contributes one line, emitted by the root in
    /// rank order.
    pub fn ordered_print(&mut self, line: &str) -> Result<()> {
        self.log(line);
        self.flush_log()
    }

    /// Sends a point-to-point message. Workers may only address the root.
    pub fn send(&mut self, to: usize, msg_type: MsgType, tag: u32, payload: Vec<u8>) -> Result<()> {
        self.ensure_open()?;
        self.send_to(to, msg_type, tag, payload)
    }

    /// Receives the next point-to-point message from `from`. `None` waits
    /// indefinitely.
    pub fn recv(&mut self, from: usize, timeout: Option<Duration>) -> Result<Envelope> {
        self.ensure_open()?;
        let link = self.link(from)?;
        link.recv(timeout).map_err(|e| with_rank(e, from))
    }

    /// Propagates SHUTDOWN and closes every link. Idempotent.
    pub fn shutdown(&mut self) {
        if !self.open {
            return;
        }
        if self.is_root() {
            for link in self.peers.iter_mut().flatten() {
                let _ = link.send(&Envelope::new(MsgType::Shutdown, 0, Vec::new()));
            }
        }
        self.close_links();
    }

    /// Drops every link without a goodbye so peers fail fast.
    pub fn abort(&mut self) {
        self.close_links();
    }

    fn close_links(&mut self) {
        for link in self.peers.iter_mut() {
            if let Some(mut l) = link.take() {
                l.close();
            }
        }
        self.open = false;
    }

    fn ensure_open(&self) -> Result<()> {
        if self.open {
            Ok(())
        } else {
            Err(Error::Closed)
        }
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank >= self.world_size {
            return Err(Error::Usage(format!(
                "rank {rank} outside a world of {}",
                self.world_size
            )));
        }
        Ok(())
    }

    fn next_tag(&mut self) -> u32 {
        self.tag = self.tag.wrapping_add(1);
        self.tag
    }

    /// Runs a collective body. Communication faults abort the environment
    /// so the remaining ranks fail instead of hanging.
    fn guard<R>(&mut self, body: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let out = body(self);
        if let Err(Error::Comm { .. } | Error::Timeout(_)) = &out {
            self.abort();
        }
        out
    }

    fn link(&mut self, rank: usize) -> Result<&mut Box<dyn Link>> {
        let slot = if self.is_root() {
            if rank == 0 || rank >= self.world_size {
                return Err(Error::Usage(format!("root has no link to rank {rank}")));
            }
            rank
        } else {
            if rank != 0 {
                return Err(Error::Usage(format!(
                    "rank {} can only talk to the root, not rank {rank}",
                    self.rank
                )));
            }
            0
        };
        self.peers[slot].as_mut().ok_or(Error::Closed)
    }

    fn send_to(&mut self, to: usize, msg_type: MsgType, tag: u32, payload: Vec<u8>) -> Result<()> {
        let envelope = Envelope::new(msg_type, tag, payload);
        self.link(to)?.send(&envelope).map_err(|e| with_rank(e, to))
    }

    fn send_all(&mut self, msg_type: MsgType, tag: u32, payload: &[u8]) -> Result<()> {
        for r in 1..self.world_size {
            self.send_to(r, msg_type, tag, payload.to_vec())?;
        }
        Ok(())
    }

    fn recv_expect(&mut self, from: usize, msg_type: MsgType, tag: u32) -> Result<Vec<u8>> {
        let timeout = self.timeout;
        let envelope = self
            .link(from)?
            .recv(Some(timeout))
            .map_err(|e| with_rank(e, from))?;
        if envelope.msg_type == MsgType::Shutdown {
            return Err(Error::comm(from, "peer shut down mid-collective"));
        }
        if envelope.msg_type != msg_type || envelope.tag != tag {
            return Err(Error::Protocol(format!(
                "rank {from} sent {:?}#{}, expected {msg_type:?}#{tag}",
                envelope.msg_type, envelope.tag
            )));
        }
        Ok(envelope.payload)
    }
}

impl Drop for Environment {
    fn drop(&mut self) {
        self.close_links();
    }
}
