//! Multi-device upload timing: the same payload pushed to N emulated AWGs at once.

use std::io::{BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use qctrl_core::wire::{codes_from_le_bytes, read_message, Command, Status, DEFAULT_MAX_BODY};
use qctrl_net::emu::awg::{AwgConfig, AwgEmulator};
use qctrl_net::link::{drain, InstrumentLink, LinkOptions};
use serde::Serialize;
use serde_json::json;

use crate::stats::{Machine, Summary};

pub const DEFAULT_TX_BYTES: usize = 25_600_000;
pub const DEFAULT_CHUNK_BYTES: usize = 1 << 21;
/// Emulated per-device ingress ceiling.
pub const DEFAULT_TX_RATE_BPS: u64 = 200_000_000;

#[derive(Debug, Clone, Serialize)]
pub struct TxOptions {
    pub device_counts: Vec<usize>,
    pub bytes_per_device: usize,
    pub chunk_bytes: usize,
    pub rate_limit_bps: Option<u64>,
    pub repeats: usize,
}

impl Default for TxOptions {
    fn default() -> Self {
        Self {
            device_counts: vec![1, 2, 4, 8],
            bytes_per_device: DEFAULT_TX_BYTES,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            rate_limit_bps: Some(DEFAULT_TX_RATE_BPS),
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TxRow {
    pub devices: usize,
    #[serde(flatten)]
    pub timing: Summary,
    /// Median time relative to the single-device median.
    pub ratio: f64,
    /// Aggregate payload rate at the median, in Mbit/s.
    pub aggregate_mbps: f64,
    /// Every device reported and read back exactly the bytes sent.
    pub verified: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TxReport {
    pub machine: Machine,
    pub options: TxOptions,
    pub rows: Vec<TxRow>,
    /// Same payload over one raw socket, without the link layer.
    pub plain_stream: Summary,
}

/// The payload split into upload commands, one slot per chunk.
fn payload(bytes: usize, chunk_bytes: usize) -> Vec<Command> {
    let total = bytes / 2;
    let per = (chunk_bytes / 2).max(1);
    (0..total.div_ceil(per))
        .map(|k| {
            let start = k * per;
            let end = (start + per).min(total);
            Command::UploadWave {
                slot: k as u16,
                codes: (start..end)
                    .map(|i| (i.wrapping_mul(7919) & 0xFFFF) as u16 as i16)
                    .collect(),
            }
        })
        .collect()
}

fn spawn_awgs(n: usize, rate: Option<u64>) -> Result<Vec<AwgEmulator>> {
    (0..n)
        .map(|_| {
            AwgEmulator::spawn(
                "127.0.0.1:0",
                AwgConfig {
                    rate_limit_bps: rate,
                    ..AwgConfig::default()
                },
            )
            .context("spawning emulated AWG")
        })
        .collect()
}

fn verify(
    link: &InstrumentLink,
    awgs: &[AwgEmulator],
    cmds: &[Command],
    bytes: usize,
) -> Result<bool> {
    for (i, awg) in awgs.iter().enumerate() {
        if awg.stats().upload_bytes != bytes as u64 {
            return Ok(false);
        }
        let mut read_back = 0usize;
        for cmd in cmds {
            let Command::UploadWave { slot, codes } = cmd else {
                unreachable!()
            };
            let r = link
                .submit(i as u16, &Command::ReadWave { slot: *slot })?
                .wait(Duration::from_secs(60));
            let resp = r.outcome.context("readback")?;
            ensure!(
                resp.is_ok(),
                "readback of slot {slot} failed with status {}",
                resp.status
            );
            if codes_from_le_bytes(&resp.payload).as_deref() != Some(codes.as_slice()) {
                return Ok(false);
            }
            read_back += resp.payload.len();
        }
        if read_back != bytes {
            return Ok(false);
        }
    }
    Ok(true)
}

/// One timed push of the payload to `n` fresh devices.
fn push_once(
    n: usize,
    cmds: &[Command],
    opts: &TxOptions,
    check: bool,
) -> Result<(Duration, bool)> {
    let awgs = spawn_awgs(n, opts.rate_limit_bps)?;
    let link = InstrumentLink::new(LinkOptions::default());
    for (i, a) in awgs.iter().enumerate() {
        link.connect(i as u16, a.local_addr())?;
    }
    let start = Instant::now();
    let mut tickets = Vec::with_capacity(n * cmds.len());
    for cmd in cmds {
        for dev in 0..n {
            tickets.push(link.submit(dev as u16, cmd)?);
        }
    }
    let results = drain(&tickets, Duration::from_secs(600));
    let elapsed = start.elapsed();
    for r in &results {
        match &r.outcome {
            Ok(resp) if resp.is_ok() => {}
            Ok(resp) => bail!(
                "device {} rejected an upload with status {}",
                r.device_id,
                resp.status
            ),
            Err(e) => bail!("device {}: {e}", r.device_id),
        }
    }
    let verified = if check {
        verify(&link, &awgs, cmds, opts.bytes_per_device)?
    } else {
        true
    };
    Ok((elapsed, verified))
}

fn plain_once(cmds: &[Command], rate: Option<u64>) -> Result<Duration> {
    let awg = spawn_awgs(1, rate)?.remove(0);
    let stream = TcpStream::connect(awg.local_addr())?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::with_capacity(1 << 16, stream);
    let start = Instant::now();
    for (rid, cmd) in cmds.iter().enumerate() {
        cmd.to_message(rid as u16).write_to(&mut writer)?;
        writer.flush()?;
        let resp = read_message(&mut reader, DEFAULT_MAX_BODY)?;
        ensure!(
            resp.body.first() == Some(&(Status::Ok as u8)),
            "plain upload rejected"
        );
    }
    Ok(start.elapsed())
}

pub fn bench_tx(opts: &TxOptions) -> Result<TxReport> {
    ensure!(opts.repeats >= 1, "repeats must be at least 1");
    ensure!(
        opts.bytes_per_device >= 2,
        "payload must hold at least one sample"
    );
    let cmds = payload(opts.bytes_per_device, opts.chunk_bytes);
    let mut rows: Vec<TxRow> = Vec::new();
    for &n in &opts.device_counts {
        ensure!(
            (1..=u16::MAX as usize).contains(&n),
            "device count {n} out of range"
        );
        let mut times = Vec::new();
        let mut verified = true;
        for rep in 0..opts.repeats {
            let (t, ok) = push_once(n, &cmds, opts, rep == 0)?;
            times.push(t);
            verified &= ok;
        }
        let timing = Summary::from_durations(&times);
        log::info!("tx: {n} device(s) median {:.3} s", timing.median_s);
        rows.push(TxRow {
            devices: n,
            timing,
            ratio: f64::NAN,
            aggregate_mbps: (n * opts.bytes_per_device) as f64 * 8.0 / timing.median_s / 1e6,
            verified,
        });
    }
    let single = rows
        .iter()
        .find(|r| r.devices == 1)
        .map(|r| r.timing.median_s);
    for r in &mut rows {
        r.ratio = single.map_or(f64::NAN, |s| r.timing.median_s / s);
    }
    let plain: Vec<Duration> = (0..opts.repeats)
        .map(|_| plain_once(&cmds, opts.rate_limit_bps))
        .collect::<Result<_>>()?;
    Ok(TxReport {
        machine: Machine::detect(),
        options: opts.clone(),
        rows,
        plain_stream: Summary::from_durations(&plain),
    })
}

impl TxReport {
    pub fn row(&self, devices: usize) -> Option<&TxRow> {
        self.rows.iter().find(|r| r.devices == devices)
    }

    /// Link-layer single-device time relative to the raw socket.
    pub fn overhead_ratio(&self) -> Option<f64> {
        self.row(1)
            .map(|r| r.timing.median_s / self.plain_stream.median_s)
    }

    pub fn table(&self) -> String {
        let rate = self
            .options
            .rate_limit_bps
            .map_or("unthrottled".to_string(), |r| {
                format!("{:.0} Mbit/s per device", r as f64 / 1e6)
            });
        let mut s = format!(
            "upload of {:.1} MB to each device ({rate}), {} repeat(s)\nmachine: {}\n",
            self.options.bytes_per_device as f64 / 1e6,
            self.options.repeats,
            self.machine.describe()
        );
        s.push_str(&format!(
            "{:>7} {:>12} {:>12} {:>8} {:>12} {:>9}\n",
            "devices", "median s", "p95 s", "T/T(1)", "agg Mbit/s", "verified"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:>7} {:>12.3} {:>12.3} {:>8.3} {:>12.1} {:>9}\n",
                r.devices, r.timing.median_s, r.timing.p95_s, r.ratio, r.aggregate_mbps, r.verified
            ));
        }
        s.push_str(&format!(
            "plain single stream: median {:.3} s (link/plain {:.3})\n",
            self.plain_stream.median_s,
            self.overhead_ratio().unwrap_or(f64::NAN)
        ));
        s
    }

    pub fn json_lines(&self) -> Vec<String> {
        let mut out = vec![
            json!({ "bench": "tx", "machine": self.machine, "options": self.options }).to_string(),
        ];
        for r in &self.rows {
            let mut v = serde_json::to_value(r).expect("row serializes");
            v["bench"] = json!("tx");
            out.push(v.to_string());
        }
        out.push(json!({ "bench": "tx", "plain_stream": self.plain_stream }).to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_covers_exact_byte_count() {
        let cmds = payload(10_000, 4096);
        let total: usize = cmds
            .iter()
            .map(|c| match c {
                Command::UploadWave { codes, .. } => codes.len() * 2,
                _ => 0,
            })
            .sum();
        assert_eq!(total, 10_000);
        assert_eq!(cmds.len(), 3);
    }

    #[test]
    fn small_push_verifies() {
        let opts = TxOptions {
            device_counts: vec![1, 3],
            bytes_per_device: 200_000,
            chunk_bytes: 65_536,
            rate_limit_bps: None,
            repeats: 1,
        };
        let r = bench_tx(&opts).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.verified));
        assert!((r.rows[0].ratio - 1.0).abs() < 1e-12);
    }
}
