//! Emulated AWG / DC source speaking the instrument wire protocol.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use qctrl_core::wire::{
    self, codes_to_le_bytes, read_message, Command, Status, WireError, WireMessage,
    DEFAULT_MAX_BODY,
};

#[derive(Debug, Clone)]
pub struct AwgConfig {
    /// Ingress limit in bits per second; `None` runs at loopback speed.
    pub rate_limit_bps: Option<u64>,
    pub readback: bool,
    pub max_body: usize,
}

impl Default for AwgConfig {
    fn default() -> Self {
        Self {
            rate_limit_bps: None,
            readback: true,
            max_body: DEFAULT_MAX_BODY,
        }
    }
}

/// Device registers and waveform memory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AwgState {
    /// Slot to the little-endian code bytes last written there.
    pub slots: BTreeMap<u16, Vec<u8>>,
    pub offsets: BTreeMap<u8, i16>,
    pub delays: BTreeMap<u8, u32>,
    pub trigger_mode: u8,
    /// Channel to the slot it is playing.
    pub playing: BTreeMap<u8, u16>,
    pub dc_microvolts: BTreeMap<u8, i64>,
}

impl AwgState {
    /// Applies one request and returns the response status and payload.
    pub fn apply(&mut self, msg: &WireMessage, readback: bool) -> (Status, Vec<u8>) {
        let cmd = match Command::from_message(msg) {
            Ok(c) => c,
            Err(WireError::UnknownOpcode(op)) => {
                return (
                    Status::UnknownOpcode,
                    format!("unknown opcode {op:#06x}").into_bytes(),
                )
            }
            Err(e) => return (Status::Malformed, e.to_string().into_bytes()),
        };
        match cmd {
            Command::UploadWave { slot, codes } => {
                self.slots.insert(slot, codes_to_le_bytes(&codes));
            }
            Command::SetOffset { channel, code } => {
                self.offsets.insert(channel, code);
            }
            Command::SetDelay { channel, samples } => {
                self.delays.insert(channel, samples);
            }
            Command::SetTrig { mode } => self.trigger_mode = mode,
            Command::Play { channel, slot } => {
                if !self.slots.contains_key(&slot) {
                    return (
                        Status::OutOfRange,
                        format!("slot {slot} is empty").into_bytes(),
                    );
                }
                self.playing.insert(channel, slot);
            }
            Command::DcSet {
                channel,
                microvolts,
            } => {
                self.dc_microvolts.insert(channel, microvolts);
            }
            Command::ReadWave { slot } => {
                if !readback {
                    return (Status::UnknownOpcode, b"readback disabled".to_vec());
                }
                return match self.slots.get(&slot) {
                    Some(bytes) => (Status::Ok, bytes.clone()),
                    None => (
                        Status::OutOfRange,
                        format!("slot {slot} is empty").into_bytes(),
                    ),
                };
            }
            Command::Ping => {}
        }
        (Status::Ok, Vec::new())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AwgStats {
    pub connections: u64,
    pub messages: u64,
    pub bytes_received: u64,
    pub upload_bytes: u64,
    pub errors: u64,
}

#[derive(Default)]
struct Counters {
    connections: AtomicU64,
    messages: AtomicU64,
    bytes_received: AtomicU64,
    upload_bytes: AtomicU64,
    errors: AtomicU64,
}

struct Shared {
    config: AwgConfig,
    state: Mutex<AwgState>,
    counters: Counters,
    paused: Mutex<bool>,
    resumed: Condvar,
    shutdown: AtomicBool,
    conns: Mutex<Vec<TcpStream>>,
    pacer: Mutex<Pacer>,
    journal: Mutex<Vec<(u16, u16)>>,
}

const JOURNAL_CAP: usize = 1 << 16;

/// Tracks cumulative ingress against the configured bit rate.
struct Pacer {
    start: Option<Instant>,
    bits: u128,
}

impl Shared {
    fn wait_unpaused(&self) {
        let mut p = self.paused.lock().unwrap();
        while *p && !self.shutdown.load(Ordering::Relaxed) {
            p = self.resumed.wait(p).unwrap();
        }
    }

    fn pace(&self, bytes: usize) {
        let Some(rate) = self.config.rate_limit_bps else {
            return;
        };
        let due = {
            let mut p = self.pacer.lock().unwrap();
            let start = *p.start.get_or_insert_with(Instant::now);
            p.bits += bytes as u128 * 8;
            start + Duration::from_secs_f64(p.bits as f64 / rate as f64)
        };
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
    }
}

/// Throttles reads so the socket drains at the configured rate and TCP
/// backpressure reaches the sender.
struct PacedReader<'a> {
    inner: TcpStream,
    shared: &'a Shared,
}

impl Read for PacedReader<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let cap = if self.shared.config.rate_limit_bps.is_some() {
            buf.len().min(64 << 10)
        } else {
            buf.len()
        };
        let n = self.inner.read(&mut buf[..cap])?;
        self.shared
            .counters
            .bytes_received
            .fetch_add(n as u64, Ordering::Relaxed);
        self.shared.pace(n);
        Ok(n)
    }
}

pub struct AwgEmulator {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl AwgEmulator {
    pub fn spawn(addr: impl ToSocketAddrs, config: AwgConfig) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            config,
            state: Mutex::new(AwgState::default()),
            counters: Counters::default(),
            paused: Mutex::new(false),
            resumed: Condvar::new(),
            shutdown: AtomicBool::new(false),
            conns: Mutex::new(Vec::new()),
            pacer: Mutex::new(Pacer {
                start: None,
                bits: 0,
            }),
            journal: Mutex::new(Vec::new()),
        });
        let acc_shared = Arc::clone(&shared);
        let acceptor = thread::Builder::new()
            .name(format!("awg-emu-{}", addr.port()))
            .spawn(move || accept_loop(listener, acc_shared))?;
        Ok(Self {
            addr,
            shared,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn state(&self) -> AwgState {
        self.shared.state.lock().unwrap().clone()
    }

    pub fn slot(&self, slot: u16) -> Option<Vec<u8>> {
        self.shared.state.lock().unwrap().slots.get(&slot).cloned()
    }

    pub fn stats(&self) -> AwgStats {
        let c = &self.shared.counters;
        AwgStats {
            connections: c.connections.load(Ordering::Relaxed),
            messages: c.messages.load(Ordering::Relaxed),
            bytes_received: c.bytes_received.load(Ordering::Relaxed),
            upload_bytes: c.upload_bytes.load(Ordering::Relaxed),
            errors: c.errors.load(Ordering::Relaxed),
        }
    }

    /// `(opcode, request_id)` of received requests in arrival order (first 65536).
    pub fn journal(&self) -> Vec<(u16, u16)> {
        self.shared.journal.lock().unwrap().clone()
    }

    /// Stops acknowledging requests until [`resume`](Self::resume).
    pub fn pause(&self) {
        *self.shared.paused.lock().unwrap() = true;
    }

    pub fn resume(&self) {
        *self.shared.paused.lock().unwrap() = false;
        self.shared.resumed.notify_all();
    }

    pub fn shutdown(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        self.resume();
        for c in self.shared.conns.lock().unwrap().drain(..) {
            c.shutdown(Shutdown::Both).ok();
        }
        // wake the blocking accept
        TcpStream::connect_timeout(&self.addr, Duration::from_millis(200)).ok();
        if let Some(a) = self.acceptor.take() {
            a.join().ok();
        }
    }
}

impl Drop for AwgEmulator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut handlers = Vec::new();
    for conn in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = conn else { continue };
        stream.set_nodelay(true).ok();
        if let Ok(c) = stream.try_clone() {
            shared.conns.lock().unwrap().push(c);
        }
        shared.counters.connections.fetch_add(1, Ordering::Relaxed);
        let s = Arc::clone(&shared);
        if let Ok(h) = thread::Builder::new()
            .name("awg-emu-conn".into())
            .spawn(move || serve(stream, s))
        {
            handlers.push(h);
        }
        handlers.retain(|h| !h.is_finished());
    }
    for h in handlers {
        h.join().ok();
    }
}

fn serve(stream: TcpStream, shared: Arc<Shared>) {
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::with_capacity(
        1 << 16,
        PacedReader {
            inner: stream,
            shared: &shared,
        },
    );
    let mut writer = BufWriter::new(write_half);
    loop {
        let msg = match read_message(&mut reader, shared.config.max_body) {
            Ok(m) => m,
            Err(e) => {
                if e.kind() == io::ErrorKind::InvalidData {
                    shared.counters.errors.fetch_add(1, Ordering::Relaxed);
                    log::warn!("awg emulator: dropping connection: {e}");
                }
                return;
            }
        };
        shared.wait_unpaused();
        if shared.shutdown.load(Ordering::Relaxed) {
            return;
        }
        shared.counters.messages.fetch_add(1, Ordering::Relaxed);
        {
            let mut j = shared.journal.lock().unwrap();
            if j.len() < JOURNAL_CAP {
                j.push((msg.opcode, msg.request_id));
            }
        }
        let (status, payload) = shared
            .state
            .lock()
            .unwrap()
            .apply(&msg, shared.config.readback);
        if status != Status::Ok {
            shared.counters.errors.fetch_add(1, Ordering::Relaxed);
        } else if msg.opcode == wire::opcode::UPLOAD_WAVE {
            shared
                .counters
                .upload_bytes
                .fetch_add(msg.body.len().saturating_sub(6) as u64, Ordering::Relaxed);
        }
        let resp = wire::response(&msg, status, &payload);
        if resp
            .write_to(&mut writer)
            .and_then(|_| writer.flush())
            .is_err()
        {
            return;
        }
    }
}
