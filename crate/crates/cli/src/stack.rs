//! Launching the manager, servers and emulators from one key=value config.

use std::collections::BTreeMap;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::Arc;

use qctrl_core::kvconfig::{KvConfig, KvError};
use qctrl_core::synth::{DigitizerProfile, ProfileError, PROFILE_KEYS};
use qctrl_net::control::{ControlConfig, ControlServer, CONTROL_TARGET, DEFAULT_AWG_BASE_PORT};
use qctrl_net::emu::awg::{AwgConfig, AwgEmulator};
use qctrl_net::emu::digitizer::{DigitizerConfig, DigitizerEmulator};
use qctrl_net::ingest::IngestOptions;
use qctrl_net::manager::{Manager, ManagerOptions};
use qctrl_net::readout::{ReadoutServer, DEFAULT_STREAM_PORT, READOUT_TARGET};
use qctrl_net::rpc::RpcServer;
use thiserror::Error;

pub const DEFAULT_MANAGER_PORT: u16 = 8800;
pub const DEFAULT_CONTROL_PORT: u16 = 8801;
pub const DEFAULT_READOUT_PORT: u16 = 8802;
pub const ENV_PREFIX: &str = "QCTRL_";

/// Keys understood in a stack config; `digitizer.<profile key>` is also accepted.
pub const STACK_KEYS: &[&str] = &[
    "components",
    "host",
    "manager.port",
    "control.port",
    "control.dc_limit_volts",
    "readout.port",
    "readout.stream_port",
    "awg.count",
    "awg.base_port",
    "awg.rate_limit_bps",
    "awg.readback",
    "digitizer.target",
    "digitizer.profile",
    "digitizer.loss_percent",
    "digitizer.reorder_percent",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    Manager,
    Control,
    Readout,
    Awg,
    Digitizer,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Manager,
        Component::Control,
        Component::Readout,
        Component::Awg,
        Component::Digitizer,
    ];

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "manager" => Component::Manager,
            "control" => Component::Control,
            "readout" => Component::Readout,
            "awg" => Component::Awg,
            "digitizer" => Component::Digitizer,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum StackError {
    #[error("reading {path}: {source}")]
    Read { path: String, source: io::Error },
    #[error(transparent)]
    Config(#[from] KvError),
    #[error("digitizer profile: {0}")]
    Profile(#[from] ProfileError),
    #[error("unknown component `{0}` (expected manager, control, readout, awg, digitizer or all)")]
    UnknownComponent(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{name}: {addr} is already in use")]
    PortInUse { name: String, addr: SocketAddr },
    #[error("{name}: cannot bind {addr}: {source}")]
    Bind {
        name: String,
        addr: SocketAddr,
        source: io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub components: Vec<Component>,
    pub host: IpAddr,
    pub manager_port: u16,
    pub control_port: u16,
    pub dc_limit_volts: f64,
    pub readout_port: u16,
    pub stream_port: u16,
    pub awg_count: u16,
    pub awg_base_port: u16,
    pub awg_rate_limit_bps: Option<u64>,
    pub awg_readback: bool,
    /// Where the digitizer streams when the readout server runs elsewhere.
    pub digitizer_target: Option<SocketAddr>,
    pub profile: DigitizerProfile,
    pub loss_percent: f64,
    pub reorder_percent: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            components: Component::ALL.to_vec(),
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            manager_port: DEFAULT_MANAGER_PORT,
            control_port: DEFAULT_CONTROL_PORT,
            dc_limit_volts: qctrl_core::instrument::DEFAULT_DC_RANGE_VOLTS,
            readout_port: DEFAULT_READOUT_PORT,
            stream_port: DEFAULT_STREAM_PORT,
            awg_count: 2,
            awg_base_port: DEFAULT_AWG_BASE_PORT,
            awg_rate_limit_bps: None,
            awg_readback: true,
            digitizer_target: None,
            profile: DigitizerProfile::default(),
            loss_percent: 0.0,
            reorder_percent: 0.0,
        }
    }
}

impl StackConfig {
    /// Every port 0, for tests and the demo.
    pub fn ephemeral() -> Self {
        Self {
            manager_port: 0,
            control_port: 0,
            readout_port: 0,
            stream_port: 0,
            awg_base_port: 0,
            ..Self::default()
        }
    }

    /// Reads a config file and applies `QCTRL_*` environment overrides.
    pub fn load(path: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self, StackError> {
        let text = std::fs::read_to_string(path).map_err(|source| StackError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut kv = KvConfig::parse(&text)?;
        let profile_keys: Vec<String> = PROFILE_KEYS
            .iter()
            .map(|k| format!("digitizer.{k}"))
            .collect();
        let known = STACK_KEYS
            .iter()
            .copied()
            .chain(profile_keys.iter().map(String::as_str));
        kv.apply_env(ENV_PREFIX, known, env);
        Self::from_kv(&kv, path.parent())
    }

    pub fn from_kv(kv: &KvConfig, base_dir: Option<&Path>) -> Result<Self, StackError> {
        for key in kv.keys() {
            let inline_profile = key
                .strip_prefix("digitizer.")
                .is_some_and(|k| PROFILE_KEYS.contains(&k));
            if !STACK_KEYS.contains(&key) && !inline_profile {
                return Err(StackError::UnknownKey(key.to_string()));
            }
        }
        let d = Self::default();
        let components = match kv.raw("components") {
            None => d.components,
            Some(list) => parse_components(list)?,
        };
        let mut profile_kv = match kv.raw("digitizer.profile") {
            Some(p) => {
                let path = base_dir.map_or_else(|| Path::new(p).to_path_buf(), |b| b.join(p));
                let text = std::fs::read_to_string(&path).map_err(|source| StackError::Read {
                    path: path.display().to_string(),
                    source,
                })?;
                KvConfig::parse(&text)?
            }
            None => KvConfig::default(),
        };
        for key in PROFILE_KEYS {
            if let Some(v) = kv.raw(&format!("digitizer.{key}")) {
                profile_kv.set(*key, v);
            }
        }
        let rate: u64 = kv.get_or("awg.rate_limit_bps", 0)?;
        Ok(Self {
            components,
            host: kv.get_or("host", d.host)?,
            manager_port: kv.get_or("manager.port", d.manager_port)?,
            control_port: kv.get_or("control.port", d.control_port)?,
            dc_limit_volts: kv.get_or("control.dc_limit_volts", d.dc_limit_volts)?,
            readout_port: kv.get_or("readout.port", d.readout_port)?,
            stream_port: kv.get_or("readout.stream_port", d.stream_port)?,
            awg_count: kv.get_or("awg.count", d.awg_count)?,
            awg_base_port: kv.get_or("awg.base_port", d.awg_base_port)?,
            awg_rate_limit_bps: (rate > 0).then_some(rate),
            awg_readback: kv.get_or("awg.readback", d.awg_readback)?,
            digitizer_target: kv.get("digitizer.target")?,
            profile: DigitizerProfile::from_kv(&profile_kv)?,
            loss_percent: kv.get_or("digitizer.loss_percent", 0.0)?,
            reorder_percent: kv.get_or("digitizer.reorder_percent", 0.0)?,
        })
    }

    fn runs(&self, c: Component) -> bool {
        self.components.contains(&c)
    }
}

fn parse_components(list: &str) -> Result<Vec<Component>, StackError> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if name == "all" {
            out.extend(Component::ALL);
        } else {
            out.push(
                Component::parse(name).ok_or_else(|| StackError::UnknownComponent(name.into()))?,
            );
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn bind_err(name: &str, addr: SocketAddr) -> impl FnOnce(io::Error) -> StackError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::AddrInUse {
            StackError::PortInUse {
                name: name.into(),
                addr,
            }
        } else {
            StackError::Bind {
                name: name.into(),
                addr,
                source,
            }
        }
    }
}

/// Running components. Dropping the stack shuts everything down.
pub struct Stack {
    pub awgs: Vec<AwgEmulator>,
    pub control: Option<(Arc<ControlServer>, RpcServer)>,
    pub readout: Option<(Arc<ReadoutServer>, RpcServer)>,
    pub digitizer: Option<DigitizerEmulator>,
    pub manager: Option<Manager>,
}

impl Stack {
    pub fn start(cfg: &StackConfig) -> Result<Self, StackError> {
        let at = |port: u16| SocketAddr::new(cfg.host, port);
        let mut awgs = Vec::new();
        if cfg.runs(Component::Awg) {
            for id in 1..=cfg.awg_count {
                let port = if cfg.awg_base_port == 0 {
                    0
                } else {
                    cfg.awg_base_port.wrapping_add(id)
                };
                let addr = at(port);
                let awg = AwgEmulator::spawn(
                    addr,
                    AwgConfig {
                        rate_limit_bps: cfg.awg_rate_limit_bps,
                        readback: cfg.awg_readback,
                        ..AwgConfig::default()
                    },
                )
                .map_err(bind_err(&format!("awg {id}"), addr))?;
                awgs.push(awg);
            }
        }

        let control = if cfg.runs(Component::Control) {
            let devices = awgs
                .iter()
                .enumerate()
                .map(|(i, a)| (i as u16 + 1, a.local_addr()))
                .collect();
            let server = Arc::new(ControlServer::new(ControlConfig {
                devices,
                device_host: cfg.host,
                base_port: cfg.awg_base_port,
                dc_limit_volts: cfg.dc_limit_volts,
                ..ControlConfig::default()
            }));
            let addr = at(cfg.control_port);
            let rpc =
                RpcServer::spawn(addr, server.clone()).map_err(bind_err("control.port", addr))?;
            Some((server, rpc))
        } else {
            None
        };

        let readout = if cfg.runs(Component::Readout) {
            let stream = at(cfg.stream_port);
            let server = Arc::new(
                ReadoutServer::spawn(stream, IngestOptions::default())
                    .map_err(bind_err("readout.stream_port", stream))?,
            );
            let addr = at(cfg.readout_port);
            let rpc =
                RpcServer::spawn(addr, server.clone()).map_err(bind_err("readout.port", addr))?;
            Some((server, rpc))
        } else {
            None
        };

        let digitizer = if cfg.runs(Component::Digitizer) {
            let target = match (&readout, cfg.digitizer_target) {
                (Some((r, _)), _) => r.stream_addr(),
                (None, Some(t)) => t,
                (None, None) => at(cfg.stream_port),
            };
            let mut dc = DigitizerConfig::new(cfg.profile.clone(), target);
            dc.loss_percent = cfg.loss_percent;
            dc.reorder_percent = cfg.reorder_percent;
            let bind = at(0);
            Some(DigitizerEmulator::spawn(bind, dc).map_err(bind_err("digitizer", bind))?)
        } else {
            None
        };

        let manager = if cfg.runs(Component::Manager) {
            let mut routes = BTreeMap::new();
            routes.insert(
                CONTROL_TARGET.to_string(),
                control
                    .as_ref()
                    .map_or(at(cfg.control_port), |(_, s)| s.local_addr()),
            );
            routes.insert(
                READOUT_TARGET.to_string(),
                readout
                    .as_ref()
                    .map_or(at(cfg.readout_port), |(_, s)| s.local_addr()),
            );
            let addr = at(cfg.manager_port);
            Some(
                Manager::spawn(addr, routes, ManagerOptions::default())
                    .map_err(bind_err("manager.port", addr))?,
            )
        } else {
            None
        };

        Ok(Self {
            awgs,
            control,
            readout,
            digitizer,
            manager,
        })
    }

    pub fn manager_addr(&self) -> Option<SocketAddr> {
        self.manager.as_ref().map(Manager::local_addr)
    }

    pub fn control_addr(&self) -> Option<SocketAddr> {
        self.control.as_ref().map(|(_, s)| s.local_addr())
    }

    pub fn readout_addr(&self) -> Option<SocketAddr> {
        self.readout.as_ref().map(|(_, s)| s.local_addr())
    }

    /// One line per running component with its address.
    pub fn describe(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(a) = self.manager_addr() {
            out.push(format!("manager   {a}"));
        }
        if let Some(a) = self.control_addr() {
            out.push(format!("control   {a}"));
        }
        if let Some((r, s)) = &self.readout {
            out.push(format!(
                "readout   {} (stream {})",
                s.local_addr(),
                r.stream_addr()
            ));
        }
        for (i, a) in self.awgs.iter().enumerate() {
            out.push(format!("awg {}     {}", i + 1, a.local_addr()));
        }
        if let Some(d) = &self.digitizer {
            out.push(format!("digitizer {}", d.local_addr()));
        }
        out
    }

    pub fn shutdown(self) {
        let Stack {
            awgs,
            control,
            readout,
            digitizer,
            manager,
        } = self;
        drop(manager);
        drop(digitizer);
        drop(readout);
        drop(control);
        drop(awgs);
    }
}
