//! Stream connections to AWG and DC-source endpoints.
//!
//! Every device gets its own worker thread that owns the connection and
//! executes tasks from an unbounded FIFO queue, one request/response round
//! trip at a time. `submit` never blocks; each submission yields a
//! [`Ticket`] that resolves to a [`TaskResult`].

use std::collections::{HashMap, HashSet};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use qctrl_core::wire::{
    read_message, split_response, Command, Status, WireMessage, DEFAULT_MAX_BODY, RESPONSE_FLAG,
};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("unknown device {0}")]
    UnknownDevice(u16),
    #[error("device {0} is already connected")]
    AlreadyConnected(u16),
    #[error("connecting to device {device} at {addr}: {reason}")]
    Connect {
        device: u16,
        addr: String,
        reason: String,
    },
    #[error("device {device} disconnected: {reason}")]
    Disconnected { device: u16, reason: String },
    #[error("request id {request_id} is still outstanding on device {device}")]
    RequestIdInUse { device: u16, request_id: u16 },
    #[error("device {device} sent an unexpected response: {reason}")]
    Protocol { device: u16, reason: String },
    #[error("timed out waiting for device {device}")]
    TimedOut { device: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u8,
    pub payload: Vec<u8>,
}

impl Response {
    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskResult {
    pub device_id: u16,
    pub request_id: u16,
    pub opcode: u16,
    pub outcome: Result<Response, LinkError>,
    pub submitted: Instant,
    /// `None` when the ticket timed out.
    pub completed: Option<Instant>,
}

impl TaskResult {
    /// True when the device acknowledged with status Ok.
    pub fn is_ok(&self) -> bool {
        matches!(&self.outcome, Ok(r) if r.is_ok())
    }
}

struct Slot {
    result: Mutex<Option<TaskResult>>,
    ready: Condvar,
}

impl Slot {
    fn complete(&self, r: TaskResult) {
        *self.result.lock().unwrap() = Some(r);
        self.ready.notify_all();
    }
}

/// Handle to one submitted task.
#[derive(Clone)]
pub struct Ticket {
    pub device_id: u16,
    pub request_id: u16,
    pub opcode: u16,
    submitted: Instant,
    slot: Arc<Slot>,
}

impl std::fmt::Debug for Ticket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ticket")
            .field("device_id", &self.device_id)
            .field("request_id", &self.request_id)
            .field("opcode", &self.opcode)
            .finish()
    }
}

impl Ticket {
    pub fn try_result(&self) -> Option<TaskResult> {
        self.slot.result.lock().unwrap().clone()
    }

    /// Blocks until the task resolves or `deadline` passes.
    pub fn wait_until(&self, deadline: Instant) -> Option<TaskResult> {
        let mut guard = self.slot.result.lock().unwrap();
        loop {
            if let Some(r) = guard.as_ref() {
                return Some(r.clone());
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            guard = self
                .slot
                .ready
                .wait_timeout(guard, deadline - now)
                .unwrap()
                .0;
        }
    }

    pub fn wait(&self, timeout: Duration) -> TaskResult {
        self.wait_until(Instant::now() + timeout)
            .unwrap_or_else(|| self.timed_out())
    }

    fn timed_out(&self) -> TaskResult {
        TaskResult {
            device_id: self.device_id,
            request_id: self.request_id,
            opcode: self.opcode,
            outcome: Err(LinkError::TimedOut {
                device: self.device_id,
            }),
            submitted: self.submitted,
            completed: None,
        }
    }
}

/// Blocks until every ticket resolves or `timeout` elapses. Unresolved
/// tickets come back as [`LinkError::TimedOut`]; results are in ticket order.
pub fn drain(tickets: &[Ticket], timeout: Duration) -> Vec<TaskResult> {
    let deadline = Instant::now() + timeout;
    tickets
        .iter()
        .map(|t| t.wait_until(deadline).unwrap_or_else(|| t.timed_out()))
        .collect()
}

struct Job {
    message: WireMessage,
    ticket: Ticket,
}

#[derive(Default)]
struct IdState {
    next: u16,
    outstanding: HashSet<u16>,
}

struct Device {
    addr: SocketAddr,
    queue: Sender<Job>,
    ids: Arc<Mutex<IdState>>,
    stream: TcpStream,
    worker: Option<JoinHandle<()>>,
}

#[derive(Debug, Clone)]
pub struct LinkOptions {
    pub connect_timeout: Duration,
    /// Per-read socket timeout on the worker; `None` blocks indefinitely.
    pub io_timeout: Option<Duration>,
    pub max_response_body: usize,
}

impl Default for LinkOptions {
    fn default() -> Self {
        Self {
            connect_timeout: Duration::from_secs(5),
            io_timeout: Some(Duration::from_secs(60)),
            max_response_body: DEFAULT_MAX_BODY,
        }
    }
}

#[derive(Default)]
pub struct InstrumentLink {
    devices: RwLock<HashMap<u16, Device>>,
    options: LinkOptions,
}

impl InstrumentLink {
    pub fn new(options: LinkOptions) -> Self {
        Self {
            devices: RwLock::new(HashMap::new()),
            options,
        }
    }

    pub fn connect(
        &self,
        device_id: u16,
        addr: impl ToSocketAddrs,
    ) -> Result<SocketAddr, LinkError> {
        let addr_text = || {
            format!(
                "{:?}",
                addr.to_socket_addrs().ok().and_then(|mut a| a.next())
            )
        };
        let conn_err = |reason: String, addr: String| LinkError::Connect {
            device: device_id,
            addr,
            reason,
        };
        if self.devices.read().unwrap().contains_key(&device_id) {
            return Err(LinkError::AlreadyConnected(device_id));
        }
        let resolved = addr
            .to_socket_addrs()
            .map_err(|e| conn_err(e.to_string(), addr_text()))?
            .next()
            .ok_or_else(|| conn_err("no address".into(), addr_text()))?;
        let stream = TcpStream::connect_timeout(&resolved, self.options.connect_timeout)
            .map_err(|e| conn_err(e.to_string(), resolved.to_string()))?;
        stream.set_nodelay(true).ok();
        stream
            .set_read_timeout(self.options.io_timeout)
            .map_err(|e| conn_err(e.to_string(), resolved.to_string()))?;
        let control = stream
            .try_clone()
            .map_err(|e| conn_err(e.to_string(), resolved.to_string()))?;

        let (tx, rx) = mpsc::channel();
        let ids = Arc::new(Mutex::new(IdState::default()));
        let worker_ids = Arc::clone(&ids);
        let max_body = self.options.max_response_body;
        let worker = thread::Builder::new()
            .name(format!("awg-link-{device_id}"))
            .spawn(move || run_worker(device_id, stream, rx, worker_ids, max_body))
            .map_err(|e| conn_err(e.to_string(), resolved.to_string()))?;

        let mut devices = self.devices.write().unwrap();
        if devices.contains_key(&device_id) {
            drop(devices);
            control.shutdown(std::net::Shutdown::Both).ok();
            return Err(LinkError::AlreadyConnected(device_id));
        }
        devices.insert(
            device_id,
            Device {
                addr: resolved,
                queue: tx,
                ids,
                stream: control,
                worker: Some(worker),
            },
        );
        Ok(resolved)
    }

    pub fn is_connected(&self, device_id: u16) -> bool {
        self.devices.read().unwrap().contains_key(&device_id)
    }

    pub fn devices(&self) -> Vec<(u16, SocketAddr)> {
        let mut v: Vec<_> = self
            .devices
            .read()
            .unwrap()
            .iter()
            .map(|(id, d)| (*id, d.addr))
            .collect();
        v.sort_unstable();
        v
    }

    /// Closes the connection. Queued tasks fail with `Disconnected`.
    pub fn disconnect(&self, device_id: u16) -> Result<(), LinkError> {
        let dev = self
            .devices
            .write()
            .unwrap()
            .remove(&device_id)
            .ok_or(LinkError::UnknownDevice(device_id))?;
        close(dev);
        Ok(())
    }

    pub fn submit(&self, device_id: u16, command: &Command) -> Result<Ticket, LinkError> {
        self.submit_raw(device_id, command.opcode(), command.encode_body())
    }

    /// Enqueues an arbitrary message; the link assigns the request id.
    pub fn submit_raw(
        &self,
        device_id: u16,
        opcode: u16,
        body: Vec<u8>,
    ) -> Result<Ticket, LinkError> {
        let devices = self.devices.read().unwrap();
        let dev = devices
            .get(&device_id)
            .ok_or(LinkError::UnknownDevice(device_id))?;
        let request_id = {
            let mut ids = dev.ids.lock().unwrap();
            let rid = ids.next;
            if !ids.outstanding.insert(rid) {
                return Err(LinkError::RequestIdInUse {
                    device: device_id,
                    request_id: rid,
                });
            }
            ids.next = rid.wrapping_add(1);
            rid
        };
        let ticket = Ticket {
            device_id,
            request_id,
            opcode,
            submitted: Instant::now(),
            slot: Arc::new(Slot {
                result: Mutex::new(None),
                ready: Condvar::new(),
            }),
        };
        let job = Job {
            message: WireMessage::new(opcode, request_id, body),
            ticket: ticket.clone(),
        };
        if let Err(mpsc::SendError(job)) = dev.queue.send(job) {
            dev.ids.lock().unwrap().outstanding.remove(&request_id);
            fail(
                &job.ticket,
                LinkError::Disconnected {
                    device: device_id,
                    reason: "worker stopped".into(),
                },
            );
        }
        Ok(ticket)
    }
}

impl Drop for InstrumentLink {
    fn drop(&mut self) {
        let devices = std::mem::take(&mut *self.devices.write().unwrap());
        for (_, dev) in devices {
            close(dev);
        }
    }
}

fn close(mut dev: Device) {
    dev.stream.shutdown(std::net::Shutdown::Both).ok();
    drop(dev.queue);
    if let Some(w) = dev.worker.take() {
        w.join().ok();
    }
}

fn fail(ticket: &Ticket, err: LinkError) {
    ticket.slot.complete(TaskResult {
        device_id: ticket.device_id,
        request_id: ticket.request_id,
        opcode: ticket.opcode,
        outcome: Err(err),
        submitted: ticket.submitted,
        completed: Some(Instant::now()),
    });
}

fn round_trip(
    device: u16,
    writer: &mut BufWriter<TcpStream>,
    reader: &mut BufReader<TcpStream>,
    msg: &WireMessage,
    max_body: usize,
) -> Result<Response, LinkError> {
    let io_err = |e: io::Error| LinkError::Disconnected {
        device,
        reason: e.to_string(),
    };
    msg.write_to(writer)
        .and_then(|_| writer.flush())
        .map_err(io_err)?;
    let resp = read_message(reader, max_body).map_err(|e| match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => LinkError::TimedOut { device },
        _ => io_err(e),
    })?;
    if resp.opcode != msg.opcode | RESPONSE_FLAG || resp.request_id != msg.request_id {
        return Err(LinkError::Protocol {
            device,
            reason: format!(
                "expected opcode {:#06x} id {}, got opcode {:#06x} id {}",
                msg.opcode | RESPONSE_FLAG,
                msg.request_id,
                resp.opcode,
                resp.request_id
            ),
        });
    }
    let (status, payload) = split_response(&resp).map_err(|e| LinkError::Protocol {
        device,
        reason: e.to_string(),
    })?;
    Ok(Response {
        status,
        payload: payload.to_vec(),
    })
}

fn run_worker(
    device: u16,
    stream: TcpStream,
    queue: Receiver<Job>,
    ids: Arc<Mutex<IdState>>,
    max_body: usize,
) {
    let mut broken: Option<LinkError> = None;
    let streams = stream
        .try_clone()
        .map(|w| (BufWriter::with_capacity(1 << 16, w), BufReader::new(stream)));
    let (mut writer, mut reader) = match streams {
        Ok(s) => s,
        Err(e) => {
            let err = LinkError::Disconnected {
                device,
                reason: e.to_string(),
            };
            for job in queue {
                ids.lock()
                    .unwrap()
                    .outstanding
                    .remove(&job.ticket.request_id);
                fail(&job.ticket, err.clone());
            }
            return;
        }
    };
    for job in queue {
        let outcome = match &broken {
            Some(e) => Err(e.clone()),
            None => round_trip(device, &mut writer, &mut reader, &job.message, max_body),
        };
        if let Err(e) = &outcome {
            // A failed exchange leaves the stream mid-message; later tasks cannot be trusted to it.
            if broken.is_none() {
                log::warn!("device {device}: {e}");
                broken = Some(match e {
                    LinkError::TimedOut { .. } => LinkError::Disconnected {
                        device,
                        reason: "previous request timed out".into(),
                    },
                    other => other.clone(),
                });
            }
        }
        ids.lock()
            .unwrap()
            .outstanding
            .remove(&job.ticket.request_id);
        job.ticket.slot.complete(TaskResult {
            device_id: device,
            request_id: job.ticket.request_id,
            opcode: job.ticket.opcode,
            outcome,
            submitted: job.ticket.submitted,
            completed: Some(Instant::now()),
        });
    }
}
