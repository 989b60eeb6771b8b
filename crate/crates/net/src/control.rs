//! The control server: exposes the virtual instrument over RPC and drives
//! the AWG / DC-source devices through the instrument link.

use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use qctrl_core::binding::ChannelBinding;
use qctrl_core::channel::ChannelConfig;
use qctrl_core::instrument::{
    InstrumentError, VirtualInstrument, WaveSource, DEFAULT_DC_RANGE_VOLTS,
};
use qctrl_core::waveform::{
    parse_expr, sample_expr, Bindings, WaveformStore, DEFAULT_LENGTH, DEFAULT_SAMPLE_RATE,
};
use qctrl_core::wire::{codes_from_le_bytes, Command, Status};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::link::{drain, InstrumentLink, LinkError, LinkOptions, TaskResult};
use crate::rpc::{codes, parse_params, Handler, RpcError};

pub const CONTROL_TARGET: &str = "control";
pub const DEFAULT_AWG_BASE_PORT: u16 = 9000;

#[derive(Debug, Clone)]
pub struct ControlConfig {
    /// Explicit device addresses; others default to `device_host:base_port+id`.
    pub devices: BTreeMap<u16, SocketAddr>,
    pub device_host: IpAddr,
    pub base_port: u16,
    pub dc_limit_volts: f64,
    pub op_timeout: Duration,
    pub link: LinkOptions,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            devices: BTreeMap::new(),
            device_host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            base_port: DEFAULT_AWG_BASE_PORT,
            dc_limit_volts: DEFAULT_DC_RANGE_VOLTS,
            op_timeout: Duration::from_secs(30),
            link: LinkOptions::default(),
        }
    }
}

pub struct ControlServer {
    config: ControlConfig,
    vi: Mutex<VirtualInstrument>,
    link: InstrumentLink,
    connect_lock: Mutex<()>,
    channel_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelName {
    virtual_channel: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigureParams {
    virtual_channel: String,
    config: ChannelConfig,
}

fn default_length() -> usize {
    DEFAULT_LENGTH
}

fn default_rate() -> f64 {
    DEFAULT_SAMPLE_RATE
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DefineWaveParams {
    slot: usize,
    expr: String,
    #[serde(default = "default_length")]
    length: usize,
    #[serde(default = "default_rate")]
    sample_rate: f64,
    #[serde(default)]
    bindings: Bindings,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WriteWaveParams {
    virtual_channel: String,
    #[serde(default)]
    slot: Option<usize>,
    #[serde(default)]
    expr: Option<String>,
    #[serde(default = "default_length")]
    length: usize,
    #[serde(default = "default_rate")]
    sample_rate: f64,
    #[serde(default)]
    bindings: Bindings,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetDcParams {
    virtual_channel: String,
    volts: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlayParams {
    #[serde(default)]
    trigger_mode: u8,
}

fn exec_err(e: impl std::fmt::Display) -> RpcError {
    RpcError::execution(e)
}

fn instrument_err(e: InstrumentError) -> RpcError {
    exec_err(e)
}

fn link_err(e: &LinkError) -> RpcError {
    match e {
        LinkError::TimedOut { .. } => RpcError::new(codes::TIMEOUT, e.to_string()),
        _ => exec_err(e),
    }
}

/// Converts a device result into an RPC error unless it is an Ok ack.
fn check_ack(r: &TaskResult) -> Result<&[u8], RpcError> {
    match &r.outcome {
        Ok(resp) if resp.is_ok() => Ok(&resp.payload),
        Ok(resp) => Err(exec_err(format!(
            "device {} rejected {}: status {} ({})",
            r.device_id,
            qctrl_core::wire::opcode_name(r.opcode).unwrap_or("request"),
            Status::from_byte(resp.status).map_or("unknown".to_string(), |s| format!("{s:?}")),
            String::from_utf8_lossy(&resp.payload)
        ))),
        Err(e) => Err(link_err(e)),
    }
}

impl ControlServer {
    pub fn new(config: ControlConfig) -> Self {
        Self {
            link: InstrumentLink::new(config.link.clone()),
            config,
            vi: Mutex::new(VirtualInstrument::new(Arc::new(WaveformStore::default()))),
            connect_lock: Mutex::new(()),
            channel_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn link(&self) -> &InstrumentLink {
        &self.link
    }

    pub fn with_instrument<R>(&self, f: impl FnOnce(&mut VirtualInstrument) -> R) -> R {
        f(&mut self.vi.lock().unwrap())
    }

    pub fn device_addr(&self, device_id: u16) -> SocketAddr {
        self.config
            .devices
            .get(&device_id)
            .copied()
            .unwrap_or_else(|| {
                SocketAddr::new(
                    self.config.device_host,
                    self.config.base_port.wrapping_add(device_id),
                )
            })
    }

    fn ensure_connected(&self, device_id: u16) -> Result<(), RpcError> {
        if self.link.is_connected(device_id) {
            return Ok(());
        }
        let _guard = self.connect_lock.lock().unwrap();
        if self.link.is_connected(device_id) {
            return Ok(());
        }
        self.link
            .connect(device_id, self.device_addr(device_id))
            .map(|_| ())
            .map_err(exec_err)
    }

    fn channel_lock(&self, name: &str) -> Arc<Mutex<()>> {
        Arc::clone(
            self.channel_locks
                .lock()
                .unwrap()
                .entry(name.to_string())
                .or_default(),
        )
    }

    fn send(&self, device_id: u16, cmd: &Command) -> Result<TaskResult, RpcError> {
        self.ensure_connected(device_id)?;
        let ticket = self.link.submit(device_id, cmd).map_err(|e| link_err(&e))?;
        Ok(ticket.wait(self.config.op_timeout))
    }

    fn list_channels(&self) -> Value {
        let vi = self.vi.lock().unwrap();
        let channels: Vec<Value> = vi
            .list()
            .map(|b| {
                json!({
                    "virtual_channel": b.virtual_channel,
                    "device_id": b.device_id,
                    "physical_channel": b.physical_channel,
                    "kind": b.kind,
                    "latency_samples": b.latency_samples,
                    "added_delay": vi.alignment().get(&b.virtual_channel).copied().unwrap_or(0),
                    "armed": vi.is_armed(&b.virtual_channel),
                })
            })
            .collect();
        json!({ "channels": channels })
    }

    fn define_wave(&self, p: DefineWaveParams) -> Result<Value, RpcError> {
        let expr =
            parse_expr(&p.expr).map_err(|e| RpcError::invalid_params(format!("expr: {e}")))?;
        let wave = sample_expr(&expr, &p.bindings, p.length, p.sample_rate).map_err(exec_err)?;
        let store = Arc::clone(self.vi.lock().unwrap().store());
        store.put(p.slot, wave).map_err(exec_err)?;
        Ok(json!({ "ok": true, "slot": p.slot, "length": p.length }))
    }

    fn write_wave(&self, p: WriteWaveParams) -> Result<Value, RpcError> {
        let source = match (p.slot, p.expr) {
            (Some(slot), None) => WaveSource::Slot(slot),
            (None, Some(text)) => WaveSource::Expr {
                expr: parse_expr(&text)
                    .map_err(|e| RpcError::invalid_params(format!("expr: {e}")))?,
                length: p.length,
                sample_rate: p.sample_rate,
            },
            _ => {
                return Err(RpcError::invalid_params(
                    "exactly one of `slot` or `expr` is required",
                ))
            }
        };
        let lock = self.channel_lock(&p.virtual_channel);
        let _serial = lock.lock().unwrap();
        let rendered = self
            .vi
            .lock()
            .unwrap()
            .render(&p.virtual_channel, &source, &p.bindings)
            .map_err(instrument_err)?;
        let samples = rendered.dac.codes.len();
        let clipped = rendered.dac.clipped;
        let device = rendered.binding.device_id;
        let result = self.send(
            device,
            &Command::UploadWave {
                slot: rendered.device_slot,
                codes: rendered.dac.codes,
            },
        )?;
        check_ack(&result)?;
        self.vi
            .lock()
            .unwrap()
            .mark_armed(&p.virtual_channel, rendered.device_slot);
        Ok(json!({
            "ok": true,
            "device_id": device,
            "device_slot": rendered.device_slot,
            "samples": samples,
            "clipped": clipped,
        }))
    }

    fn read_wave(&self, p: ChannelName) -> Result<Value, RpcError> {
        let b = self
            .vi
            .lock()
            .unwrap()
            .binding(&p.virtual_channel)
            .map_err(instrument_err)?
            .clone();
        let r = self.send(
            b.device_id,
            &Command::ReadWave {
                slot: b.physical_channel as u16,
            },
        )?;
        let payload = check_ack(&r)?;
        let codes = codes_from_le_bytes(payload).ok_or_else(|| exec_err("odd-length readback"))?;
        Ok(json!({ "codes": codes }))
    }

    fn set_dc(&self, p: SetDcParams) -> Result<Value, RpcError> {
        let lock = self.channel_lock(&p.virtual_channel);
        let _serial = lock.lock().unwrap();
        let (b, microvolts) = self
            .vi
            .lock()
            .unwrap()
            .dc_level(&p.virtual_channel, p.volts, self.config.dc_limit_volts)
            .map_err(instrument_err)?;
        let r = self.send(
            b.device_id,
            &Command::DcSet {
                channel: b.physical_channel,
                microvolts,
            },
        )?;
        check_ack(&r)?;
        Ok(json!({ "ok": true, "microvolts": microvolts }))
    }

    fn play_all(&self, p: PlayParams) -> Result<Value, RpcError> {
        let plan = {
            let mut vi = self.vi.lock().unwrap();
            let plan = vi.play_plan().map_err(instrument_err)?;
            vi.set_trigger_mode(p.trigger_mode);
            plan
        };
        let mut devices: Vec<u16> = plan.iter().map(|(b, _)| b.device_id).collect();
        devices.sort_unstable();
        devices.dedup();
        for d in &devices {
            self.ensure_connected(*d)?;
        }
        let mut tickets = Vec::new();
        for d in &devices {
            tickets.push(
                self.link
                    .submit(
                        *d,
                        &Command::SetTrig {
                            mode: p.trigger_mode,
                        },
                    )
                    .map_err(|e| link_err(&e))?,
            );
        }
        for (b, slot) in &plan {
            tickets.push(
                self.link
                    .submit(
                        b.device_id,
                        &Command::Play {
                            channel: b.physical_channel,
                            slot: *slot,
                        },
                    )
                    .map_err(|e| link_err(&e))?,
            );
        }
        for r in drain(&tickets, self.config.op_timeout) {
            check_ack(&r)?;
        }
        let played: Vec<&str> = plan
            .iter()
            .map(|(b, _)| b.virtual_channel.as_str())
            .collect();
        Ok(json!({ "ok": true, "played": played, "devices": devices }))
    }
}

impl Handler for ControlServer {
    fn target(&self) -> &str {
        CONTROL_TARGET
    }

    fn handle(&self, method: &str, params: Value) -> Result<Value, RpcError> {
        match method {
            "ping" => parse_params::<NoParams>(params).map(|_| json!("pong")),
            "bind_channel" => {
                let b: ChannelBinding = parse_params(params)?;
                self.vi.lock().unwrap().bind(b).map_err(instrument_err)?;
                Ok(json!({ "ok": true }))
            }
            "unbind_channel" => {
                let p: ChannelName = parse_params(params)?;
                self.vi
                    .lock()
                    .unwrap()
                    .unbind(&p.virtual_channel)
                    .map_err(instrument_err)?;
                Ok(json!({ "ok": true }))
            }
            "list_channels" => parse_params::<NoParams>(params).map(|_| self.list_channels()),
            "configure_channel" => {
                let p: ConfigureParams = parse_params(params)?;
                self.vi
                    .lock()
                    .unwrap()
                    .configure(&p.virtual_channel, p.config)
                    .map_err(instrument_err)?;
                Ok(json!({ "ok": true }))
            }
            "align_timing" => {
                parse_params::<NoParams>(params)?;
                let added = self.vi.lock().unwrap().align_timing();
                Ok(json!({ "added": added }))
            }
            "define_wave" => self.define_wave(parse_params(params)?),
            "write_wave" => self.write_wave(parse_params(params)?),
            "read_wave" => self.read_wave(parse_params(params)?),
            "set_dc" => self.set_dc(parse_params(params)?),
            "play_all" => self.play_all(parse_params(params)?),
            other => Err(RpcError::new(
                codes::UNKNOWN_METHOD,
                format!("unknown method `control.{other}`"),
            )),
        }
    }
}
