use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use qctrl_cli::demo::{run_demo, DemoOptions};
use qctrl_cli::gen::{bench_gen, MIN_ITERATIONS};
use qctrl_cli::rx::{bench_rx, RxOptions, RxProfile};
use qctrl_cli::stack::{Stack, StackConfig, StackError};
use qctrl_cli::tx::{
    bench_tx, TxOptions, DEFAULT_CHUNK_BYTES, DEFAULT_TX_BYTES, DEFAULT_TX_RATE_BPS,
};
use qctrl_core::kvconfig::KvConfig;
use qctrl_core::synth::DigitizerProfile;
use qctrl_net::emu::awg::{AwgConfig, AwgEmulator};
use qctrl_net::emu::digitizer::{DigitizerConfig, DigitizerEmulator};
use qctrl_net::rpc::RpcClient;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "qctrl", version, about = "Qubit control and readout stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Emit machine-readable JSON lines instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Launch components described by a key=value config file (QCTRL_* env vars override keys).
    Run { config: PathBuf },
    /// Time waveform generation for all eight kinds.
    BenchGen {
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Time uploads to 1..N emulated AWGs in parallel.
    BenchTx {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        devices: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_TX_BYTES)]
        bytes: usize,
        #[arg(long, default_value_t = DEFAULT_CHUNK_BYTES)]
        chunk_bytes: usize,
        /// Per-device ingress ceiling in bit/s; 0 runs unthrottled.
        #[arg(long, default_value_t = DEFAULT_TX_RATE_BPS)]
        rate_limit_bps: u64,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Stream from an emulated digitizer into the ingest engine.
    BenchRx {
        #[arg(long, value_enum, default_value_t = RxProfile::Throughput)]
        profile: RxProfile,
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        loss_percent: Option<f64>,
        #[command(flatten)]
        out: Output,
    },
    /// Run a complete readout experiment on an in-process stack.
    Demo {
        #[arg(long, default_value_t = 1000)]
        shots: usize,
        #[arg(long, default_value_t = 1000)]
        train_shots: usize,
        /// Digitizer profile file (key=value).
        #[arg(long)]
        profile: Option<PathBuf>,
        #[command(flatten)]
        out: Output,
    },
    /// Run a single device emulator.
    #[command(subcommand)]
    Emulate(Emulate),
    /// Send one RPC and print the result.
    Call {
        #[arg(long, default_value = "127.0.0.1:8800")]
        addr: SocketAddr,
        /// `target.method`, e.g. `control.list_channels`.
        method: String,
        /// JSON params.
        params: Option<String>,
        #[arg(long, default_value_t = 30.0)]
        timeout_s: f64,
    },
}

#[derive(Subcommand)]
enum Emulate {
    Awg {
        #[arg(long, default_value_t = 9001)]
        port: u16,
        /// Ingress ceiling in bit/s; 0 runs unthrottled.
        #[arg(long, default_value_t = 0)]
        rate_limit_bps: u64,
        #[arg(long)]
        no_readback: bool,
    },
    Digitizer {
        #[arg(long, default_value = "127.0.0.1:9100")]
        target: SocketAddr,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        loss_percent: f64,
        #[arg(long, default_value_t = 0.0)]
        reorder_percent: f64,
    },
}

/// Bad input: missing or invalid config, bad arguments.
const EXIT_USAGE: u8 = 2;

fn print_report(json: bool, table: String, lines: Vec<String>) {
    if json {
        for l in lines {
            println!("{l}");
        }
    } else {
        print!("{table}");
    }
}

fn load_profile(path: &Option<PathBuf>) -> Result<Option<DigitizerProfile>> {
    let Some(path) = path else { return Ok(None) };
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(DigitizerProfile::from_kv(&KvConfig::parse(&text)?)?))
}

fn wait_for_signal() -> Result<()> {
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        tx.send(()).ok();
    })
    .context("installing the signal handler")?;
    rx.recv().ok();
    Ok(())
}

fn run(config: PathBuf) -> Result<ExitCode> {
    let cfg = match StackConfig::load(&config, |k| std::env::var(k).ok()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("qctrl: {e}");
            return Ok(ExitCode::from(EXIT_USAGE));
        }
    };
    let stack = match Stack::start(&cfg) {
        Ok(s) => s,
        Err(e @ (StackError::PortInUse { .. } | StackError::Bind { .. })) => {
            eprintln!("qctrl: {e}");
            return Ok(ExitCode::FAILURE);
        }
        Err(e) => return Err(e.into()),
    };
    for line in stack.describe() {
        println!("{line}");
    }
    wait_for_signal()?;
    log::info!("shutting down");
    stack.shutdown();
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("qctrl: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run { config } => return run(config),
        Command::BenchGen { iterations, out } => {
            let r = bench_gen(iterations.max(MIN_ITERATIONS));
            print_report(out.json, r.table(), r.json_lines());
        }
        Command::BenchTx {
            devices,
            bytes,
            chunk_bytes,
            rate_limit_bps,
            repeats,
            out,
        } => {
            let r = bench_tx(&TxOptions {
                device_counts: devices,
                bytes_per_device: bytes,
                chunk_bytes,
                rate_limit_bps: (rate_limit_bps > 0).then_some(rate_limit_bps),
                repeats,
            })?;
            print_report(out.json, r.table(), r.json_lines());
        }
        Command::BenchRx {
            profile,
            duration_s,
            loss_percent,
            out,
        } => {
            let mut o = RxOptions::for_profile(profile);
            if let Some(d) = duration_s {
                o.duration = Duration::from_secs_f64(d);
            }
            if let Some(l) = loss_percent {
                o.loss_percent = l;
            }
            let r = bench_rx(&o)?;
            print_report(out.json, r.table(), r.json_lines());
        }
        Command::Demo {
            shots,
            train_shots,
            profile,
            out,
        } => {
            let mut o = DemoOptions {
                shots,
                train_shots,
                ..DemoOptions::default()
            };
            if let Some(p) = load_profile(&profile)? {
                o.profile = p;
            }
            let r = run_demo(&o)?;
            let line = {
                let mut v = serde_json::to_value(&r)?;
                v["bench"] = Value::from("demo");
                v.to_string()
            };
            print_report(out.json, r.summary(), vec![line]);
        }
        Command::Emulate(Emulate::Awg {
            port,
            rate_limit_bps,
            no_readback,
        }) => {
            let emu = AwgEmulator::spawn(
                ("0.0.0.0", port),
                AwgConfig {
                    rate_limit_bps: (rate_limit_bps > 0).then_some(rate_limit_bps),
                    readback: !no_readback,
                    ..AwgConfig::default()
                },
            )
            .with_context(|| format!("binding port {port}"))?;
            println!("awg emulator on {}", emu.local_addr());
            wait_for_signal()?;
            drop(emu);
        }
        Command::Emulate(Emulate::Digitizer {
            target,
            port,
            profile,
            loss_percent,
            reorder_percent,
        }) => {
            let mut cfg = DigitizerConfig::new(load_profile(&profile)?.unwrap_or_default(), target);
            cfg.loss_percent = loss_percent;
            cfg.reorder_percent = reorder_percent;
            let emu = DigitizerEmulator::spawn(("0.0.0.0", port), cfg)
                .with_context(|| format!("binding port {port}"))?;
            println!(
                "digitizer emulator on {} streaming to {target}",
                emu.local_addr()
            );
            wait_for_signal()?;
            let s = emu.stop();
            println!(
                "triggers {} frames {} slipped {}",
                s.triggers, s.frames_sent, s.slipped
            );
        }
        Command::Call {
            addr,
            method,
            params,
            timeout_s,
        } => {
            let Some((target, method)) = method.split_once('.') else {
                eprintln!("qctrl: method must be `target.method`");
                return Ok(ExitCode::from(EXIT_USAGE));
            };
            let params: Value = match params {
                Some(p) => serde_json::from_str(&p).context("params are not valid JSON")?,
                None => Value::Null,
            };
            let timeout = Duration::from_secs_f64(timeout_s);
            let result =
                RpcClient::connect(addr, timeout)?.call(target, method, params, timeout)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
