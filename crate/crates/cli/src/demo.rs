//! End-to-end experiment through the manager: configure channels, upload
//! pulses, start playback, train a discriminator and read qubit states.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context, Result};
use qctrl_core::readout::{AcquisitionConfig, InputBinding, QubitState};
use qctrl_core::synth::DigitizerProfile;
use qctrl_net::rpc::RpcClient;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::stack::{Stack, StackConfig};

const CALL_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub train_shots: usize,
    pub shots: usize,
    pub profile: DigitizerProfile,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            train_shots: 1000,
            shots: 1000,
            profile: DigitizerProfile {
                record_length: 2000,
                trigger_interval: Duration::from_micros(200),
                ..DigitizerProfile::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoReport {
    pub channels: usize,
    pub alignment: Value,
    pub played: Value,
    pub discriminator: Value,
    pub train_shots: usize,
    pub shots: usize,
    /// Fraction of shots whose state matches the prepared state.
    pub fidelity: f64,
    pub fidelity_zero: f64,
    pub fidelity_one: f64,
    /// Size of the state-mode acquire reply, in bytes.
    pub reply_bytes: usize,
    pub elapsed_s: f64,
}

impl DemoReport {
    pub fn summary(&self) -> String {
        format!(
            "channels bound: {}\nalignment added: {}\nplaying: {}\ndiscriminator: {}\n\
             readout fidelity over {} shots: {:.4} (|0> {:.4}, |1> {:.4})\n\
             state reply: {} bytes for {} shots\nelapsed: {:.2} s\n",
            self.channels,
            self.alignment,
            self.played,
            self.discriminator,
            self.shots,
            self.fidelity,
            self.fidelity_zero,
            self.fidelity_one,
            self.reply_bytes,
            self.shots,
            self.elapsed_s
        )
    }
}

struct Client {
    inner: RpcClient,
    next: u64,
}

impl Client {
    fn call(&mut self, target: &str, method: &str, params: Value) -> Result<Value> {
        self.inner
            .call(target, method, params, CALL_TIMEOUT)
            .with_context(|| format!("{target}.{method}"))
    }

    /// Returns the result and the reply line length.
    fn call_sized(&mut self, target: &str, method: &str, params: Value) -> Result<(Value, usize)> {
        self.next += 1;
        let line = json!({ "id": format!("demo-{}", self.next), "target": target, "method": method, "params": params });
        let reply = self.inner.call_raw(&line.to_string(), CALL_TIMEOUT)?;
        let resp: qctrl_net::rpc::Response = serde_json::from_str(&reply)?;
        let v = resp
            .into_result()
            .map_err(|e| anyhow!("{target}.{method}: {e}"))?;
        Ok((v, reply.len()))
    }
}

#[derive(Deserialize)]
struct IqReply {
    seqs: Vec<u32>,
    points: Vec<(f64, f64)>,
}

#[derive(Deserialize)]
struct StateReply {
    seqs: Vec<u32>,
    states: Vec<QubitState>,
}

/// Drives an already running stack through `manager`.
pub fn run_demo_against(manager: SocketAddr, opts: &DemoOptions) -> Result<DemoReport> {
    let start = Instant::now();
    let mut c = Client {
        inner: RpcClient::connect(manager, Duration::from_secs(5))
            .context("connecting to the manager")?,
        next: 0,
    };
    c.call("manager", "ping", Value::Null)?;

    let channels = [
        ("Q0.X", 1, 0, "waveform", 12),
        ("Q0.Y", 1, 1, "waveform", 12),
        ("Q0.Z", 2, 0, "waveform", 30),
        ("Q0.flux", 2, 1, "dc", 0),
    ];
    for (name, dev, ch, kind, latency) in channels {
        c.call(
            "control",
            "bind_channel",
            json!({"virtual_channel": name, "device_id": dev, "physical_channel": ch, "kind": kind, "latency_samples": latency}),
        )?;
    }
    let alignment = c.call("control", "align_timing", Value::Null)?["added"].clone();
    c.call(
        "control",
        "define_wave",
        json!({"slot": 0, "expr": "gauss(mu=3e-6,sigma=5e-7)*0.5"}),
    )?;
    c.call(
        "control",
        "write_wave",
        json!({"virtual_channel": "Q0.X", "slot": 0}),
    )?;
    // derivative-shaped quadrature component
    c.call(
        "control",
        "write_wave",
        json!({"virtual_channel": "Q0.Y", "expr": "-0.1*(t-3e-6)/5e-7*gauss(mu=3e-6,sigma=5e-7)"}),
    )?;
    c.call(
        "control",
        "write_wave",
        json!({"virtual_channel": "Q0.Z", "expr": "flattop(a=0.3,sigma=5e-8,t1=1e-6,t2=5e-6)"}),
    )?;
    c.call(
        "control",
        "set_dc",
        json!({"virtual_channel": "Q0.flux", "volts": 0.25}),
    )?;
    let played = c.call("control", "play_all", json!({"trigger_mode": 1}))?["played"].clone();

    let p = &opts.profile;
    let acq = AcquisitionConfig {
        inputs: vec![InputBinding {
            name: "q0".into(),
            device_id: p.device_id,
            channel_id: p.channel_id,
        }],
        record_length: p.record_length,
        sample_rate: p.sample_rate,
        demod_freq: p.carrier_freq,
        fir: None,
    };
    c.call("readout", "configure", serde_json::to_value(&acq)?)?;

    let iq: IqReply = serde_json::from_value(c.call(
        "readout",
        "acquire",
        json!({"n": opts.train_shots, "mode": "iq", "input": "q0"}),
    )?)?;
    let (mut zero, mut one) = (Vec::new(), Vec::new());
    for (seq, pt) in iq.seqs.iter().zip(&iq.points) {
        match p.state_for(*seq) {
            QubitState::Zero => zero.push(*pt),
            QubitState::One => one.push(*pt),
        }
    }
    let discriminator = c.call("readout", "train", json!({"zero": zero, "one": one}))?;

    let (v, reply_bytes) = c.call_sized(
        "readout",
        "acquire",
        json!({"n": opts.shots, "mode": "state", "input": "q0"}),
    )?;
    let states: StateReply = serde_json::from_value(v)?;
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (seq, got) in states.seqs.iter().zip(&states.states) {
        let want = p.state_for(*seq);
        let k = u8::from(want) as usize;
        totals[k] += 1;
        hits[k] += usize::from(*got == want);
    }
    let frac = |h: usize, t: usize| {
        if t == 0 {
            f64::NAN
        } else {
            h as f64 / t as f64
        }
    };
    Ok(DemoReport {
        channels: channels.len(),
        alignment,
        played,
        discriminator,
        train_shots: opts.train_shots,
        shots: states.states.len(),
        fidelity: frac(hits[0] + hits[1], totals[0] + totals[1]),
        fidelity_zero: frac(hits[0], totals[0]),
        fidelity_one: frac(hits[1], totals[1]),
        reply_bytes,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Starts an in-process stack on ephemeral ports and runs the demo on it.
pub fn run_demo(opts: &DemoOptions) -> Result<DemoReport> {
    let cfg = StackConfig {
        profile: opts.profile.clone(),
        ..StackConfig::ephemeral()
    };
    let stack = Stack::start(&cfg)?;
    let manager = stack.manager_addr().expect("demo stack runs a manager");
    let report = run_demo_against(manager, opts);
    stack.shutdown();
    report
}
