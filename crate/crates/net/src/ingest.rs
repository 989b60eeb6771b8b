//! Digitizer stream ingest: UDP datagrams in, reassembled trigger records out
//! through a bounded queue.

use std::collections::VecDeque;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use qctrl_core::datalink::{decode_frame, Reassembler, ReassemblyStats, Record, MAX_FRAME_LEN};
use socket2::{Domain, Protocol, Socket, Type};

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Completed records held before the oldest is dropped.
    pub queue_capacity: usize,
    pub max_pending: usize,
    /// Partial records older than this are flushed as incomplete.
    pub flush_age: Duration,
    pub recv_buffer: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            queue_capacity: 1024,
            max_pending: 4096,
            flush_age: Duration::from_millis(200),
            recv_buffer: 8 << 20,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub datagrams: u64,
    pub bytes: u64,
    pub decode_errors: u64,
    pub reassembly: ReassemblyStats,
    pub queue_depth: usize,
    pub max_queue_depth: usize,
    /// Records dropped because the queue was full.
    pub queue_overflow: u64,
}

/// Bounded FIFO of finished records shared between the ingest thread and
/// consumers.
pub struct RecordQueue {
    items: Mutex<VecDeque<Record>>,
    ready: Condvar,
    capacity: usize,
    max_depth: AtomicUsize,
    overflow: AtomicU64,
}

impl RecordQueue {
    fn new(capacity: usize) -> Self {
        Self {
            items: Mutex::new(VecDeque::with_capacity(capacity)),
            ready: Condvar::new(),
            capacity: capacity.max(1),
            max_depth: AtomicUsize::new(0),
            overflow: AtomicU64::new(0),
        }
    }

    fn push_all(&self, records: impl IntoIterator<Item = Record>) {
        let mut q = self.items.lock().unwrap();
        let mut pushed = false;
        for r in records {
            if q.len() == self.capacity {
                q.pop_front();
                self.overflow.fetch_add(1, Ordering::Relaxed);
            }
            q.push_back(r);
            pushed = true;
        }
        if pushed {
            self.max_depth.fetch_max(q.len(), Ordering::Relaxed);
            drop(q);
            self.ready.notify_all();
        }
    }

    pub fn pop_timeout(&self, timeout: Duration) -> Option<Record> {
        let deadline = Instant::now() + timeout;
        let mut q = self.items.lock().unwrap();
        loop {
            if let Some(r) = q.pop_front() {
                return Some(r);
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            q = self.ready.wait_timeout(q, deadline - now).unwrap().0;
        }
    }

    pub fn clear(&self) -> usize {
        let mut q = self.items.lock().unwrap();
        let n = q.len();
        q.clear();
        n
    }

    pub fn len(&self) -> usize {
        self.items.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn reset_max_depth(&self) {
        self.max_depth.store(self.len(), Ordering::Relaxed);
    }
}

struct Shared {
    queue: RecordQueue,
    stop: AtomicBool,
    datagrams: AtomicU64,
    bytes: AtomicU64,
    decode_errors: AtomicU64,
    reassembly: Mutex<ReassemblyStats>,
}

pub struct IngestEngine {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

const POLL: Duration = Duration::from_millis(20);

impl IngestEngine {
    pub fn spawn(bind: impl ToSocketAddrs, options: IngestOptions) -> io::Result<Self> {
        let bind = bind
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no bind address"))?;
        let socket = Socket::new(Domain::for_address(bind), Type::DGRAM, Some(Protocol::UDP))?;
        socket.set_recv_buffer_size(options.recv_buffer).ok();
        socket.bind(&bind.into())?;
        let socket: UdpSocket = socket.into();
        socket.set_read_timeout(Some(POLL))?;
        let addr = socket.local_addr()?;
        let shared = Arc::new(Shared {
            queue: RecordQueue::new(options.queue_capacity),
            stop: AtomicBool::new(false),
            datagrams: AtomicU64::new(0),
            bytes: AtomicU64::new(0),
            decode_errors: AtomicU64::new(0),
            reassembly: Mutex::new(ReassemblyStats::default()),
        });
        let s = Arc::clone(&shared);
        let thread = thread::Builder::new()
            .name("readout-ingest".into())
            .spawn(move || run(socket, options, s))?;
        Ok(Self {
            addr,
            shared,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn queue(&self) -> &RecordQueue {
        &self.shared.queue
    }

    pub fn stats(&self) -> IngestStats {
        let s = &self.shared;
        IngestStats {
            datagrams: s.datagrams.load(Ordering::Relaxed),
            bytes: s.bytes.load(Ordering::Relaxed),
            decode_errors: s.decode_errors.load(Ordering::Relaxed),
            reassembly: *s.reassembly.lock().unwrap(),
            queue_depth: s.queue.len(),
            max_queue_depth: s.queue.max_depth.load(Ordering::Relaxed),
            queue_overflow: s.queue.overflow.load(Ordering::Relaxed),
        }
    }

    pub fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

impl Drop for IngestEngine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn run(socket: UdpSocket, options: IngestOptions, shared: Arc<Shared>) {
    let mut reasm = Reassembler::new(options.max_pending);
    let mut buf = vec![0u8; MAX_FRAME_LEN + 64];
    let mut last_flush = Instant::now();
    let mut done = Vec::new();
    let publish_every = Duration::from_millis(10);
    let mut last_publish = Instant::now();
    while !shared.stop.load(Ordering::Relaxed) {
        let mut idle = false;
        match socket.recv(&mut buf) {
            Ok(n) => {
                shared.datagrams.fetch_add(1, Ordering::Relaxed);
                shared.bytes.fetch_add(n as u64, Ordering::Relaxed);
                match decode_frame(&buf[..n]) {
                    Ok(frame) => {
                        if let Some(r) = reasm.ingest(frame) {
                            done.push(r);
                        }
                    }
                    Err(_) => {
                        shared.decode_errors.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                idle = true
            }
            Err(e) => {
                log::warn!("ingest: {e}");
                thread::sleep(POLL);
            }
        }
        if !done.is_empty() {
            *shared.reassembly.lock().unwrap() = reasm.stats();
            shared.queue.push_all(done.drain(..));
        }
        let now = Instant::now();
        if now.duration_since(last_flush) >= options.flush_age / 2 {
            shared.queue.push_all(reasm.flush(now, options.flush_age));
            last_flush = now;
        }
        if idle || now.duration_since(last_publish) >= publish_every {
            *shared.reassembly.lock().unwrap() = reasm.stats();
            last_publish = now;
        }
    }
    shared.queue.push_all(reasm.flush_all());
    *shared.reassembly.lock().unwrap() = reasm.stats();
}
