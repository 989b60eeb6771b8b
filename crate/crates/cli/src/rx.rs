//! Digitizer stream ingest: sustained rate, completed-queue depth, trigger
//! slip and loss accounting.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use qctrl_core::readout::Demodulator;
use qctrl_core::synth::DigitizerProfile;
use qctrl_net::emu::digitizer::{DigitizerConfig, DigitizerEmulator};
use qctrl_net::ingest::{IngestEngine, IngestOptions};
use serde::{Deserialize, Serialize};
use serde_json::json;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::stats::Machine;

pub const THROUGHPUT_TARGET_MBPS: f64 = 400.0;
pub const REALTIME_MAX_QUEUE_DEPTH: usize = 16;
pub const REALTIME_MAX_SLIP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RxProfile {
    /// Short records at a high trigger rate.
    Throughput,
    /// 10,000-sample records every 500 µs, demodulated as they complete.
    Realtime,
    /// The real-time stream with 1% random frame loss.
    Loss,
}

#[derive(Debug, Clone, Serialize)]
pub struct RxOptions {
    pub profile: RxProfile,
    pub duration: Duration,
    pub record_length: usize,
    pub trigger_interval: Duration,
    pub noise_sigma: f64,
    pub loss_percent: f64,
    /// Demodulate each record in the consumer, as the readout server does.
    pub demodulate: bool,
    pub seed: u64,
}

impl RxOptions {
    pub fn for_profile(profile: RxProfile) -> Self {
        let base = DigitizerProfile::default();
        match profile {
            // 728 samples fill one frame; 40 kHz gives ~471 Mbit/s on the wire
            RxProfile::Throughput => Self {
                profile,
                duration: Duration::from_secs(10),
                record_length: qctrl_core::datalink::MAX_SAMPLES_PER_FRAME,
                trigger_interval: Duration::from_micros(25),
                noise_sigma: 0.0,
                loss_percent: 0.0,
                demodulate: false,
                seed: base.seed,
            },
            RxProfile::Realtime => Self {
                profile,
                duration: Duration::from_secs(10),
                record_length: 10_000,
                trigger_interval: Duration::from_micros(500),
                noise_sigma: base.noise_sigma,
                loss_percent: 0.0,
                demodulate: true,
                seed: base.seed,
            },
            RxProfile::Loss => Self {
                profile,
                duration: Duration::from_secs(5),
                record_length: 10_000,
                trigger_interval: Duration::from_micros(500),
                noise_sigma: base.noise_sigma,
                loss_percent: 1.0,
                demodulate: true,
                seed: base.seed,
            },
        }
    }

    pub fn triggers(&self) -> u64 {
        (self.duration.as_secs_f64() / self.trigger_interval.as_secs_f64()).round() as u64
    }

    fn digitizer_profile(&self) -> DigitizerProfile {
        DigitizerProfile {
            record_length: self.record_length,
            trigger_interval: self.trigger_interval,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            ..DigitizerProfile::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RxReport {
    pub machine: Machine,
    pub options: RxOptions,
    pub triggers: u64,
    pub frames_sent: u64,
    pub frames_dropped: u64,
    pub datagrams: u64,
    pub bytes: u64,
    pub elapsed_s: f64,
    /// Datagram bytes received per second over the sending window, in Mbit/s.
    pub wire_mbps: f64,
    /// Sample payload bytes only.
    pub payload_mbps: f64,
    pub records_complete: u64,
    pub records_incomplete: u64,
    pub records_corrupt: u64,
    pub decode_errors: u64,
    pub duplicate_frames: u64,
    pub queue_overflow: u64,
    pub max_queue_depth: usize,
    pub consumed: u64,
    pub slipped: u64,
    pub slip_fraction: f64,
    pub frames_per_record: u64,
}

impl RxReport {
    /// Frames lost between emulator and reassembler.
    pub fn frames_unaccounted(&self) -> u64 {
        self.frames_sent.saturating_sub(self.datagrams)
    }

    pub fn reassembly_errors(&self) -> u64 {
        self.records_incomplete
            + self.records_corrupt
            + self.decode_errors
            + self.queue_overflow
            + self.frames_unaccounted()
    }

    pub fn incomplete_fraction(&self) -> f64 {
        let seen = self.records_complete + self.records_incomplete;
        if seen == 0 {
            0.0
        } else {
            self.records_incomplete as f64 / seen as f64
        }
    }

    /// Probability that a record loses at least one frame under independent frame loss.
    pub fn expected_incomplete_fraction(&self) -> f64 {
        let p = self.options.loss_percent / 100.0;
        1.0 - (1.0 - p).powi(self.frames_per_record as i32)
    }

    /// Whether the observed incomplete count lies within `k` standard
    /// deviations of the binomial mean, plus its exact two-sided tail mass.
    pub fn loss_consistency(&self, k: f64) -> (bool, f64) {
        let n = self.records_complete + self.records_incomplete;
        let p = self.expected_incomplete_fraction();
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        let x = self.records_incomplete;
        let within = (x as f64 - mean).abs() <= k * sd;
        let tail = Binomial::new(p, n)
            .map(|b| {
                let lo = b.cdf(x);
                let hi = if x == 0 { 1.0 } else { 1.0 - b.cdf(x - 1) };
                (2.0 * lo.min(hi)).min(1.0)
            })
            .unwrap_or(f64::NAN);
        (within, tail)
    }

    pub fn table(&self) -> String {
        let o = &self.options;
        let mut s = format!(
            "digitizer ingest ({:?}): {} samples every {:?}, {:.1} s, loss {}%\nmachine: {}\n",
            o.profile,
            o.record_length,
            o.trigger_interval,
            o.duration.as_secs_f64(),
            o.loss_percent,
            self.machine.describe()
        );
        s.push_str(&format!(
            "triggers {}  frames sent {}  dropped {}  received {}\n",
            self.triggers, self.frames_sent, self.frames_dropped, self.datagrams
        ));
        s.push_str(&format!(
            "rate {:.1} Mbit/s on the wire ({:.1} payload) over {:.2} s\n",
            self.wire_mbps, self.payload_mbps, self.elapsed_s
        ));
        s.push_str(&format!(
            "records complete {}  incomplete {}  corrupt {}  decode errors {}  overflow {}\n",
            self.records_complete,
            self.records_incomplete,
            self.records_corrupt,
            self.decode_errors,
            self.queue_overflow
        ));
        s.push_str(&format!(
            "max queue depth {}  trigger slip {} ({:.3}%)\n",
            self.max_queue_depth,
            self.slipped,
            100.0 * self.slip_fraction
        ));
        if o.loss_percent > 0.0 {
            let (ok, tail) = self.loss_consistency(3.0);
            s.push_str(&format!(
                "incomplete fraction {:.4} vs expected {:.4} (within 3 sd: {ok}, two-sided p {tail:.3})\n",
                self.incomplete_fraction(),
                self.expected_incomplete_fraction()
            ));
        }
        s
    }

    pub fn json_lines(&self) -> Vec<String> {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v["bench"] = json!("rx");
        vec![v.to_string()]
    }
}

pub fn bench_rx(opts: &RxOptions) -> Result<RxReport> {
    let engine = IngestEngine::spawn(
        "127.0.0.1:0",
        IngestOptions {
            flush_age: Duration::from_millis(100),
            ..IngestOptions::default()
        },
    )
    .context("binding the ingest socket")?;
    let profile = opts.digitizer_profile();
    let frames_per_record = opts
        .record_length
        .div_ceil(qctrl_core::datalink::MAX_SAMPLES_PER_FRAME) as u64;
    let demod = opts.demodulate.then(|| {
        Demodulator::new(
            profile.carrier_freq,
            profile.sample_rate,
            profile.record_length,
        )
    });

    let stop = Arc::new(AtomicBool::new(false));
    let consumed = Arc::new(AtomicU64::new(0));
    let engine = Arc::new(engine);
    let consumer = {
        let (engine, stop, consumed) = (
            Arc::clone(&engine),
            Arc::clone(&stop),
            Arc::clone(&consumed),
        );
        thread::Builder::new()
            .name("rx-consumer".into())
            .spawn(move || {
                let mut sink = 0.0;
                while !stop.load(Ordering::Relaxed) {
                    if let Some(rec) = engine.queue().pop_timeout(Duration::from_millis(20)) {
                        if let (Some(d), true) = (&demod, rec.is_usable()) {
                            sink += d.demod_codes(&rec.samples).i;
                        }
                        consumed.fetch_add(1, Ordering::Relaxed);
                    }
                }
                std::hint::black_box(sink);
            })?
    };
    engine.queue().reset_max_depth();

    let mut cfg = DigitizerConfig::new(profile, engine.local_addr());
    cfg.loss_percent = opts.loss_percent;
    cfg.max_triggers = Some(opts.triggers());
    let start = Instant::now();
    let digitizer =
        DigitizerEmulator::spawn("127.0.0.1:0", cfg).context("starting the digitizer emulator")?;
    let dstats = digitizer.join();
    let elapsed = start.elapsed();

    // let the ingest thread drain the socket and flush partial records
    let settle = Instant::now() + Duration::from_secs(5);
    let mut last = u64::MAX;
    thread::sleep(Duration::from_millis(300));
    while Instant::now() < settle {
        let s = engine.stats();
        if s.datagrams == last && s.queue_depth == 0 {
            break;
        }
        last = s.datagrams;
        thread::sleep(Duration::from_millis(150));
    }
    stop.store(true, Ordering::Relaxed);
    consumer.join().ok();
    let s = engine.stats();
    let payload_bytes = s
        .bytes
        .saturating_sub(s.datagrams * qctrl_core::datalink::FRAME_HEADER_LEN as u64);
    let secs = elapsed.as_secs_f64();
    Ok(RxReport {
        machine: Machine::detect(),
        options: opts.clone(),
        triggers: dstats.triggers,
        frames_sent: dstats.frames_sent,
        frames_dropped: dstats.frames_dropped,
        datagrams: s.datagrams,
        bytes: s.bytes,
        elapsed_s: secs,
        wire_mbps: s.bytes as f64 * 8.0 / secs / 1e6,
        payload_mbps: payload_bytes as f64 * 8.0 / secs / 1e6,
        records_complete: s.reassembly.records_complete,
        records_incomplete: s.reassembly.records_incomplete,
        records_corrupt: s.reassembly.records_corrupt,
        decode_errors: s.decode_errors,
        duplicate_frames: s.reassembly.duplicate_frames,
        queue_overflow: s.queue_overflow,
        max_queue_depth: s.max_queue_depth,
        consumed: consumed.load(Ordering::Relaxed),
        slipped: dstats.slipped,
        slip_fraction: dstats.slip_fraction(),
        frames_per_record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_clean_run_has_no_errors() {
        let mut o = RxOptions::for_profile(RxProfile::Realtime);
        o.duration = Duration::from_millis(200);
        o.trigger_interval = Duration::from_millis(1);
        let r = bench_rx(&o).unwrap();
        assert_eq!(r.triggers, 200);
        assert_eq!(r.frames_per_record, 14);
        assert_eq!(r.records_complete, 200);
        assert_eq!(r.reassembly_errors(), 0);
        assert_eq!(r.consumed, 200);
    }

    #[test]
    fn expected_loss_fraction() {
        let mut o = RxOptions::for_profile(RxProfile::Loss);
        o.duration = Duration::from_millis(300);
        o.trigger_interval = Duration::from_millis(1);
        let r = bench_rx(&o).unwrap();
        let want = 1.0 - 0.99f64.powi(14);
        assert!((r.expected_incomplete_fraction() - want).abs() < 1e-15);
        assert_eq!(r.records_complete + r.records_incomplete, 300);
    }
}
