//! The readout server: digitizer ingest, homodyne I/Q extraction and state
//! discrimination over RPC. Replies carry results, not samples, unless raw
//! records are asked for explicitly.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use qctrl_core::datalink::Record;
use qctrl_core::readout::{
    preprocess, train_discriminator, AcquisitionConfig, Demodulator, Discriminator, InputBinding,
    IqPoint, QubitState,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ingest::{IngestEngine, IngestOptions, IngestStats};
use crate::rpc::{codes, parse_params, Handler, RpcError};

pub const READOUT_TARGET: &str = "readout";
pub const DEFAULT_STREAM_PORT: u16 = 9100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquireMode {
    Raw,
    Iq,
    State,
}

/// Result of one acquisition, in trigger order.
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub seqs: Vec<u32>,
    pub points: Vec<IqPoint>,
    pub records: Vec<Vec<i16>>,
    /// Records for this input that arrived incomplete or corrupt and were skipped.
    pub skipped: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum AcquireError {
    #[error("acquisition is not configured")]
    NotConfigured,
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("no discriminator installed; train or load one first")]
    Untrained,
    #[error("timed out after {received} of {wanted} records")]
    Timeout { received: usize, wanted: usize },
}

impl From<AcquireError> for RpcError {
    fn from(e: AcquireError) -> Self {
        match e {
            AcquireError::Timeout { .. } => RpcError::new(codes::TIMEOUT, e.to_string()),
            _ => RpcError::execution(e),
        }
    }
}

struct Session {
    config: AcquisitionConfig,
    demod: Demodulator,
}

pub struct ReadoutServer {
    engine: IngestEngine,
    session: Mutex<Option<Session>>,
    discriminator: Mutex<Option<Discriminator>>,
    acquire_lock: Mutex<()>,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_fresh() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AcquireParams {
    n: usize,
    mode: AcquireMode,
    #[serde(default)]
    input: Option<String>,
    #[serde(default = "default_timeout_ms")]
    timeout_ms: u64,
    /// Discard records queued before the call.
    #[serde(default = "default_fresh")]
    fresh: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainParams {
    zero: Vec<(f64, f64)>,
    one: Vec<(f64, f64)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyParams {
    points: Vec<(f64, f64)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PathParams {
    path: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

fn to_points(v: &[(f64, f64)]) -> Vec<IqPoint> {
    v.iter().map(|&(i, q)| IqPoint::new(i, q)).collect()
}

fn discriminator_json(d: &Discriminator) -> Value {
    json!({ "w": d.w, "b": d.b })
}

pub fn stats_json(s: &IngestStats) -> Value {
    let r = &s.reassembly;
    json!({
        "datagrams": s.datagrams,
        "bytes": s.bytes,
        "decode_errors": s.decode_errors,
        "frames": r.frames_ingested,
        "duplicate_frames": r.duplicate_frames,
        "conflicting_frames": r.conflicting_frames,
        "late_frames": r.late_frames,
        "records_complete": r.records_complete,
        "records_incomplete": r.records_incomplete,
        "records_corrupt": r.records_corrupt,
        "queue_depth": s.queue_depth,
        "max_queue_depth": s.max_queue_depth,
        "queue_overflow": s.queue_overflow,
    })
}

impl ReadoutServer {
    /// Binds the digitizer stream socket.
    pub fn spawn(stream_addr: impl ToSocketAddrs, options: IngestOptions) -> io::Result<Self> {
        Ok(Self {
            engine: IngestEngine::spawn(stream_addr, options)?,
            session: Mutex::new(None),
            discriminator: Mutex::new(None),
            acquire_lock: Mutex::new(()),
        })
    }

    pub fn stream_addr(&self) -> SocketAddr {
        self.engine.local_addr()
    }

    pub fn engine(&self) -> &IngestEngine {
        &self.engine
    }

    pub fn configure(&self, config: AcquisitionConfig) -> Result<(), RpcError> {
        config
            .validate()
            .map_err(|e| RpcError::invalid_params(e.to_string()))?;
        let demod = Demodulator::new(config.demod_freq, config.sample_rate, config.record_length);
        *self.session.lock().unwrap() = Some(Session { config, demod });
        Ok(())
    }

    pub fn set_discriminator(&self, d: Option<Discriminator>) {
        *self.discriminator.lock().unwrap() = d;
    }

    pub fn discriminator(&self) -> Option<Discriminator> {
        *self.discriminator.lock().unwrap()
    }

    /// Collects `n` usable records for one input and reduces them per `mode`.
    pub fn acquire(
        &self,
        n: usize,
        mode: AcquireMode,
        input: Option<&str>,
        timeout: Duration,
        fresh: bool,
    ) -> Result<(Acquisition, Vec<QubitState>), AcquireError> {
        let _one_at_a_time = self.acquire_lock.lock().unwrap();
        let (config, demod) = {
            let s = self.session.lock().unwrap();
            let s = s.as_ref().ok_or(AcquireError::NotConfigured)?;
            (s.config.clone(), s.demod.clone())
        };
        let binding: InputBinding = match input {
            Some(name) => config
                .input(name)
                .cloned()
                .ok_or_else(|| AcquireError::UnknownInput(name.into()))?,
            None => config
                .inputs
                .first()
                .cloned()
                .ok_or_else(|| AcquireError::UnknownInput("<none configured>".into()))?,
        };
        let disc = match mode {
            AcquireMode::State => Some(self.discriminator().ok_or(AcquireError::Untrained)?),
            _ => None,
        };
        let mut acq = Acquisition {
            seqs: Vec::with_capacity(n),
            points: Vec::new(),
            records: Vec::new(),
            skipped: 0,
        };
        if n == 0 {
            return Ok((acq, Vec::new()));
        }
        let queue = self.engine.queue();
        if fresh {
            queue.clear();
        }
        let deadline = Instant::now() + timeout;
        let mut matching: Vec<Record> = Vec::with_capacity(n);
        while matching.len() < n {
            let now = Instant::now();
            if now >= deadline {
                return Err(AcquireError::Timeout {
                    received: matching.len(),
                    wanted: n,
                });
            }
            let Some(rec) = queue.pop_timeout(deadline - now) else {
                continue;
            };
            if rec.key.device_id != binding.device_id || rec.key.channel_id != binding.channel_id {
                continue;
            }
            if !rec.is_usable() || rec.samples.len() != config.record_length {
                acq.skipped += 1;
                continue;
            }
            matching.push(rec);
        }
        matching.sort_by_key(|r| r.key.trigger_seq);
        for rec in matching {
            acq.seqs.push(rec.key.trigger_seq);
            match mode {
                AcquireMode::Raw => acq.records.push(rec.samples),
                _ => {
                    let p = match &config.fir {
                        None => demod.demod_codes(&rec.samples),
                        Some(fir) => {
                            let w = preprocess(&rec, Some(fir), config.sample_rate)
                                .expect("usable record");
                            demod.demod(&w)
                        }
                    };
                    acq.points.push(p);
                }
            }
        }
        let states = disc
            .map(|d| acq.points.iter().map(|&p| d.classify(p)).collect())
            .unwrap_or_default();
        Ok((acq, states))
    }

    fn acquire_rpc(&self, p: AcquireParams) -> Result<Value, RpcError> {
        let (acq, states) = self.acquire(
            p.n,
            p.mode,
            p.input.as_deref(),
            Duration::from_millis(p.timeout_ms),
            p.fresh,
        )?;
        Ok(match p.mode {
            AcquireMode::Raw => {
                json!({ "seqs": acq.seqs, "records": acq.records, "skipped": acq.skipped })
            }
            AcquireMode::Iq => {
                let points: Vec<[f64; 2]> = acq.points.iter().map(|p| [p.i, p.q]).collect();
                json!({ "seqs": acq.seqs, "points": points, "skipped": acq.skipped })
            }
            AcquireMode::State => {
                json!({ "seqs": acq.seqs, "states": states, "skipped": acq.skipped })
            }
        })
    }
}

impl Handler for ReadoutServer {
    fn target(&self) -> &str {
        READOUT_TARGET
    }

    fn handle(&self, method: &str, params: Value) -> Result<Value, RpcError> {
        match method {
            "ping" => parse_params::<NoParams>(params).map(|_| json!("pong")),
            "configure" => {
                self.configure(parse_params(params)?)?;
                Ok(json!({ "ok": true }))
            }
            "acquire" => self.acquire_rpc(parse_params(params)?),
            "train" => {
                let p: TrainParams = parse_params(params)?;
                let d = train_discriminator(&to_points(&p.zero), &to_points(&p.one))
                    .map_err(RpcError::execution)?;
                self.set_discriminator(Some(d));
                Ok(discriminator_json(&d))
            }
            "classify" => {
                let p: ClassifyParams = parse_params(params)?;
                let d = self
                    .discriminator()
                    .ok_or_else(|| RpcError::execution(AcquireError::Untrained))?;
                let states: Vec<QubitState> = to_points(&p.points)
                    .into_iter()
                    .map(|p| d.classify(p))
                    .collect();
                Ok(json!({ "states": states }))
            }
            "save_discriminator" => {
                let p: PathParams = parse_params(params)?;
                let d = self
                    .discriminator()
                    .ok_or_else(|| RpcError::execution(AcquireError::Untrained))?;
                std::fs::write(&p.path, d.to_text())
                    .map_err(|e| RpcError::execution(format!("{}: {e}", p.path.display())))?;
                Ok(json!({ "ok": true }))
            }
            "load_discriminator" => {
                let p: PathParams = parse_params(params)?;
                let text = std::fs::read_to_string(&p.path)
                    .map_err(|e| RpcError::execution(format!("{}: {e}", p.path.display())))?;
                let d: Discriminator = text.parse().map_err(RpcError::execution)?;
                self.set_discriminator(Some(d));
                Ok(discriminator_json(&d))
            }
            "stats" => parse_params::<NoParams>(params).map(|_| stats_json(&self.engine.stats())),
            other => Err(RpcError::new(
                codes::UNKNOWN_METHOD,
                format!("unknown method `readout.{other}`"),
            )),
        }
    }
}
