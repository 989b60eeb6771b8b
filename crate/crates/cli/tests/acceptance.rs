//! Acceptance run: one PASS/FAIL line per criterion, with measured values.
//!
//! Timing criteria measure this machine; run on an otherwise idle host.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use qctrl_cli::gen::bench_gen;
use qctrl_cli::rx::{
    bench_rx, RxOptions, RxProfile, REALTIME_MAX_QUEUE_DEPTH, REALTIME_MAX_SLIP,
    THROUGHPUT_TARGET_MBPS,
};
use qctrl_cli::tx::{bench_tx, TxOptions};
use qctrl_core::datalink::{
    decode_frame, encode_frame, fragment_record, Frame, Reassembler, MAX_SAMPLES_PER_FRAME,
};
use qctrl_core::readout::{
    homodyne, train_discriminator, AcquisitionConfig, InputBinding, IqPoint, QubitState,
};
use qctrl_core::synth::DigitizerProfile;
use qctrl_core::waveform::{
    differentiate_expr, differentiate_numeric, generate, integrate, parse_expr, sample_expr,
    Bindings, WaveKind, WaveParams, Waveform,
};
use qctrl_core::wire::{decode_message, encode_message, Command, WireMessage};
use qctrl_net::control::{ControlConfig, ControlServer};
use qctrl_net::emu::awg::{AwgConfig, AwgEmulator};
use qctrl_net::emu::digitizer::{DigitizerConfig, DigitizerEmulator};
use qctrl_net::ingest::IngestOptions;
use qctrl_net::manager::{Manager, ManagerOptions};
use qctrl_net::readout::{AcquireMode, ReadoutServer};
use qctrl_net::rpc::{RpcClient, RpcServer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};

const FS: f64 = 1e9;

struct Verdict {
    pass: bool,
    summary: String,
    notes: Vec<String>,
}

impl Verdict {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Self {
            pass,
            summary: summary.into(),
            notes: Vec::new(),
        }
    }

    fn note(mut self, n: impl Into<String>) -> Self {
        self.notes.push(n.into());
        self
    }
}

fn run(id: u32, title: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Verdict::new(false, format!("panicked: {msg}"))
    });
    println!(
        "[{}] {id:>2}. {title}: {} ({:.1} s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.summary,
        start.elapsed().as_secs_f64()
    );
    for n in &v.notes {
        println!("         {n}");
    }
    v.pass
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn wave(v: Vec<f64>) -> Waveform {
    Waveform::new(v, FS).unwrap()
}

fn params(p: &[(&str, f64)]) -> WaveParams {
    p.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

// 1
fn generation_timing() -> Verdict {
    let r = bench_gen(200);
    let bound_us = 1000.0;
    let worst = r.slowest().unwrap();
    let pass = r.rows.len() == 8 && r.rows.iter().all(|row| row.median_us() <= bound_us);
    let flattop = r.rows.iter().find(|row| row.kind == "Flattop").unwrap();
    let mut v = Verdict::new(
        pass,
        format!(
            "slowest median {:.1} µs ({}) <= {bound_us} µs over 8 kinds",
            worst.median_us(),
            worst.kind
        ),
    );
    for row in &r.rows {
        v = v.note(format!(
            "{:<20} median {:>8.2} µs  p95 {:>8.2} µs  reference {:>4.0} µs",
            row.kind,
            row.median_us(),
            row.timing.p95_s * 1e6,
            row.reference_us
        ));
    }
    v.note(format!(
        "info: flattop median is {:.2}x the slowest kind",
        flattop.timing.median_s / worst.timing.median_s
    ))
}

// 2
fn transmission_scaling() -> Verdict {
    let opts = TxOptions::default();
    let r = bench_tx(&opts).unwrap();
    let t1 = r.row(1).unwrap().timing.median_s;
    let ratios: Vec<(usize, f64)> = r
        .rows
        .iter()
        .filter(|x| x.devices > 1)
        .map(|x| (x.devices, x.ratio))
        .collect();
    let scaling = ratios.iter().all(|&(_, q)| q <= 1.5);
    let verified = r.rows.iter().all(|x| x.verified);
    let overhead = r.overhead_ratio().unwrap();
    let baseline = (overhead - 1.0).abs() <= 0.10;
    let mut v = Verdict::new(
        scaling && verified && baseline,
        format!(
            "T(1) {:.3} s; T(N)/T(1) {} (bound 1.5); bytes verified {verified}; single link vs plain socket {:.3} (bound ±10%)",
            t1,
            ratios.iter().map(|(n, q)| format!("N={n}: {q:.3}")).collect::<Vec<_>>().join(", "),
            overhead
        ),
    )
    .note(format!(
        "device ingress limited to {:.0} Mbit/s each, 25.6 MB per device, median of {} runs",
        opts.rate_limit_bps.unwrap() as f64 / 1e6,
        opts.repeats
    ));
    let open = bench_tx(&TxOptions {
        rate_limit_bps: None,
        repeats: 1,
        ..TxOptions::default()
    })
    .unwrap();
    v = v.note(format!(
        "info: unthrottled on {} cpu: {} ; link/plain {:.3}",
        open.machine.cpus,
        open.rows
            .iter()
            .map(|x| format!(
                "N={} {:.3} s ({:.2}x)",
                x.devices, x.timing.median_s, x.ratio
            ))
            .collect::<Vec<_>>()
            .join(", "),
        open.overhead_ratio().unwrap()
    ));
    v
}

// 3
fn ingest_throughput() -> Verdict {
    let r = bench_rx(&RxOptions::for_profile(RxProfile::Throughput)).unwrap();
    let pass = r.wire_mbps >= THROUGHPUT_TARGET_MBPS
        && r.reassembly_errors() == 0
        && r.records_complete == r.triggers
        && r.elapsed_s >= 9.9;
    Verdict::new(
        pass,
        format!(
            "{:.1} Mbit/s over {:.1} s (target {THROUGHPUT_TARGET_MBPS}); {} records, {} reassembly errors",
            r.wire_mbps,
            r.elapsed_s,
            r.records_complete,
            r.reassembly_errors()
        ),
    )
    .note(format!(
        "{} samples per record, {} triggers/s, payload {:.1} Mbit/s, max queue depth {}",
        r.options.record_length,
        (1.0 / r.options.trigger_interval.as_secs_f64()).round(),
        r.payload_mbps,
        r.max_queue_depth
    ))
}

/// Fraction of 500 µs deadlines missed by a full interval by a bare timer loop
/// doing 100 µs of work, as a measure of host scheduling noise.
fn timer_baseline(duration: Duration) -> f64 {
    let interval = Duration::from_micros(500);
    let n = (duration.as_secs_f64() / interval.as_secs_f64()) as u32;
    let start = Instant::now();
    let mut late = 0;
    for k in 0..n {
        let due = start + interval * k;
        loop {
            let now = Instant::now();
            if now >= due {
                late += u32::from(now - due >= interval);
                break;
            }
            let w = due - now;
            if w > Duration::from_micros(100) {
                thread::sleep(w - Duration::from_micros(100));
            } else {
                thread::yield_now();
            }
        }
        let t = Instant::now();
        while t.elapsed() < Duration::from_micros(100) {
            std::hint::spin_loop();
        }
    }
    late as f64 / n as f64
}

// 4
fn realtime_acquisition() -> Verdict {
    let r = bench_rx(&RxOptions::for_profile(RxProfile::Realtime)).unwrap();
    let pass = r.max_queue_depth <= REALTIME_MAX_QUEUE_DEPTH
        && r.slip_fraction < REALTIME_MAX_SLIP
        && r.reassembly_errors() == 0
        && r.elapsed_s >= 9.9;
    let baseline = timer_baseline(Duration::from_secs(3));
    Verdict::new(
        pass,
        format!(
            "max queue depth {} (bound {REALTIME_MAX_QUEUE_DEPTH}); trigger slip {:.3}% (bound {}%); {} records, {} errors",
            r.max_queue_depth,
            100.0 * r.slip_fraction,
            100.0 * REALTIME_MAX_SLIP,
            r.records_complete,
            r.reassembly_errors()
        ),
    )
    .note(format!(
        "10,000-sample records every 500 µs for {:.1} s, each demodulated on arrival; {:.1} Mbit/s",
        r.elapsed_s, r.wire_mbps
    ))
    .note(format!(
        "info: bare 500 µs timer loop on this host misses {:.3}% of deadlines by a full interval",
        100.0 * baseline
    ))
}

fn tone(a: f64, f: f64, phi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| a * (2.0 * PI * f * k as f64 / FS + phi).cos())
        .collect()
}

// 5
fn homodyne_correctness() -> Verdict {
    let (n, f) = (10_000, 50e6);
    let w = wave(tone(0.8, f, PI / 3.0, n));
    let p = homodyne(&w, f);
    let (mut si, mut sq) = (0.0, 0.0);
    for (k, x) in w.samples().iter().enumerate() {
        let arg = 2.0 * PI * f * k as f64 / FS;
        si += x * arg.cos();
        sq += x * arg.sin();
    }
    let (oi, oq) = (2.0 * si / n as f64, 2.0 * sq / n as f64);
    let golden_err = (p.i - oi).abs().max((p.q - oq).abs());
    let expected_err = (p.i - 0.4).abs().max((p.q + 0.692_820_323_027_550_9).abs());

    let mut r = rng(5);
    let setup = |r: &mut ChaCha8Rng| {
        let periods = r.random_range(1..20usize);
        let per = r.random_range(10..200usize);
        let n = periods * per;
        (n, FS * periods as f64 / n as f64)
    };
    let mut linear_fail = 0;
    let mut phase_fail = 0;
    for _ in 0..1000 {
        let (n, f) = setup(&mut r);
        let a = r.random_range(-3.0..3.0);
        let w1: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mixed: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + y).collect();
        let lhs = homodyne(&wave(mixed), f);
        let (p1, p2) = (homodyne(&wave(w1), f), homodyne(&wave(w2), f));
        let tol = 1e-12 * (a.abs() + 1.0) * 2.0;
        if (lhs.i - (a * p1.i + p2.i)).abs() > tol || (lhs.q - (a * p1.q + p2.q)).abs() > tol {
            linear_fail += 1;
        }
    }
    for _ in 0..1000 {
        let (n, f) = setup(&mut r);
        let a = r.random_range(0.05..1.0);
        let phi = r.random_range(-PI..PI);
        let delta = r.random_range(-PI..PI);
        let p = homodyne(&wave(tone(a, f, phi, n)), f);
        let q = homodyne(&wave(tone(a, f, phi + delta, n)), f);
        let (x, y) = (p.i, -p.q);
        let (rx, ry) = (
            x * delta.cos() - y * delta.sin(),
            x * delta.sin() + y * delta.cos(),
        );
        if (q.i - rx).abs() > 1e-9 || (-q.q - ry).abs() > 1e-9 {
            phase_fail += 1;
        }
    }
    Verdict::new(
        golden_err < 1e-9 && expected_err < 1e-9 && linear_fail == 0 && phase_fail == 0,
        format!(
            "(I,Q) = ({:.12}, {:.12}); |diff| vs summation oracle {golden_err:.1e}, vs (0.4, -0.69282) {expected_err:.1e}; \
             linearity failures {linear_fail}/1000, phase failures {phase_fail}/1000",
            p.i, p.q
        ),
    )
}

// 6
fn flattop_identity() -> Verdict {
    let dt = 1.0 / FS;
    let sigma = 500e-9;
    let (k1, k2) = (1500usize, 4500usize);
    let n = 6000;
    // rect sampled over [k1, k2) convolved with a unit-area Gaussian kernel by direct summation
    let half = (10.0 * sigma / dt) as isize;
    let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
    let kernel: Vec<f64> = (-half..=half)
        .map(|k| {
            let x = k as f64 * dt;
            norm * (-x * x / (2.0 * sigma * sigma)).exp() * dt
        })
        .collect();
    let oracle: Vec<f64> = (0..n as isize)
        .map(|m| {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let src = m - (j as isize - half);
                if src >= k1 as isize && src < k2 as isize {
                    acc += kv;
                }
            }
            acc
        })
        .collect();
    let flat = generate(
        WaveKind::Flattop,
        &params(&[
            ("sigma", sigma),
            ("t1", (k1 as f64 - 0.5) * dt),
            ("t2", (k2 as f64 - 0.5) * dt),
        ]),
        n,
        FS,
    )
    .unwrap();
    let max_diff = oracle
        .iter()
        .zip(flat.samples())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Verdict::new(
        max_diff < 1e-6,
        format!("max |flattop - rect*gauss| = {max_diff:.2e} over {n} points (bound 1e-6)"),
    )
    .note("oracle: direct summation of a 1 GS/s rectangle against a 10-sigma Gaussian kernel")
}

const OVERSAMPLE: usize = 100;

/// Worst |symbolic - central difference| relative to the derivative peak,
/// skipping grid points within one sample of `skip`.
fn symbolic_error(text: &str, len: usize, skip: &[usize]) -> f64 {
    let e = parse_expr(text).unwrap();
    let d = differentiate_expr(&e).unwrap();
    let sym = sample_expr(&d, &Bindings::new(), len, FS).unwrap();
    let fine_rate = FS * OVERSAMPLE as f64;
    let fine = sample_expr(&e, &Bindings::new(), len * OVERSAMPLE, fine_rate).unwrap();
    let s = fine.samples();
    let peak = sym
        .samples()
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1.0);
    let mut worst = 0.0f64;
    for n in 1..len - 1 {
        if skip.iter().any(|&k| n.abs_diff(k) <= 1) {
            continue;
        }
        let k = n * OVERSAMPLE;
        let num = (s[k + 1] - s[k - 1]) * fine_rate / 2.0;
        worst = worst.max((num - sym.samples()[n]).abs());
    }
    worst / peak
}

// 7
fn calculus_pair() -> Verdict {
    let mut r = rng(7);
    let mut worst_inverse = 0.0f64;
    for _ in 0..100 {
        let len = r.random_range(2..5000usize);
        let scale = 10f64.powi(r.random_range(-3..3));
        let w = wave(
            (0..len)
                .map(|_| scale * r.random_range(-1.0..1.0))
                .collect(),
        );
        let back = differentiate_numeric(&integrate(&w));
        let peak = w.samples().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for n in 1..len {
            worst_inverse = worst_inverse.max((w.samples()[n] - back.samples()[n]).abs() / peak);
        }
    }
    let mut cases: Vec<(String, Vec<usize>)> = vec![
        ("dc(a=0.25)".into(), vec![]),
        ("slope(a=0.6, t0=4e-7, width=1e-6)".into(), vec![400, 1400]),
    ];
    for _ in 0..20 {
        let a = r.random_range(0.1..1.0);
        let f = r.random_range(1e6..5e7);
        let phi = r.random_range(-3.0..3.0);
        let sigma = r.random_range(5e-8..3e-7);
        let t1 = r.random_range(3e-7..8e-7);
        let t2 = t1 + r.random_range(3e-7..1.5e-6);
        cases.push((format!("sine(a={a}, f={f}, phi={phi})"), vec![]));
        cases.push((format!("gauss(a={a}, mu=1.5e-6, sigma={sigma})"), vec![]));
        cases.push((
            format!("flattop(a={a}, sigma={}, t1={t1}, t2={t2})", sigma / 2.0),
            vec![],
        ));
    }
    let mut worst_sym = 0.0f64;
    let mut worst_case = String::new();
    for (text, skip) in &cases {
        let e = symbolic_error(text, 3000, skip);
        if e > worst_sym {
            worst_sym = e;
            worst_case = text.clone();
        }
    }
    Verdict::new(
        worst_inverse <= 1e-9 && worst_sym < 1e-4,
        format!(
            "diff(integrate(w)) worst relative error {worst_inverse:.1e} over 100 waveforms (bound 1e-9); \
             symbolic vs central difference worst {worst_sym:.1e} over {} expressions (bound 1e-4)",
            cases.len()
        ),
    )
    .note(format!("worst symbolic case: {worst_case}"))
    .note("errors relative to peak |w| and peak |dw/dt|; central differences taken at dt/100 around each 1 GS/s point")
}

// 8
fn reassembly_properties() -> Verdict {
    let mut r = rng(8);
    let (mut perm_fail, mut dup_fail, mut loss_fail) = (0, 0, 0);
    let cases = 10_000;
    for case in 0..cases {
        let len = r.random_range(1..=6 * MAX_SAMPLES_PER_FRAME);
        let samples: Vec<i16> = (0..len).map(|_| r.random_range(-2048..=2047)).collect();
        let seq = case as u32;
        let mut frames = fragment_record(3, 1, seq, &samples).unwrap();
        frames.shuffle(&mut r);

        // permutation plus duplicates
        let mut stream = frames.clone();
        let dups = r.random_range(0..=frames.len());
        for _ in 0..dups {
            let f = frames[r.random_range(0..frames.len())].clone();
            let at = r.random_range(0..=stream.len());
            stream.insert(at, f);
        }
        let mut ra = Reassembler::new(16);
        let mut out: Vec<_> = stream.into_iter().filter_map(|f| ra.ingest(f)).collect();
        out.extend(ra.flush_all());
        let exact_once = out.len() == 1 && out[0].is_usable() && out[0].samples == samples;
        if !exact_once {
            if dups == 0 {
                perm_fail += 1;
            } else {
                dup_fail += 1;
            }
        }

        // loss of a random non-empty subset
        if frames.len() > 1 {
            let drop_n = r.random_range(1..frames.len());
            let (lost, kept) = frames.split_at(drop_n);
            let mut want: Vec<u16> = lost.iter().map(|f| f.frame_index).collect();
            want.sort_unstable();
            let mut ra = Reassembler::new(16);
            let early: Vec<_> = kept.iter().cloned().filter_map(|f| ra.ingest(f)).collect();
            let flushed = ra.flush_all();
            let ok = early.is_empty()
                && flushed.len() == 1
                && !flushed[0].complete
                && flushed[0].missing == want;
            loss_fail += usize::from(!ok);
        }
    }
    Verdict::new(
        perm_fail + dup_fail + loss_fail == 0,
        format!(
            "{cases} shuffled streams: permutation failures {perm_fail}, duplicate failures {dup_fail}, loss-detection failures {loss_fail}"
        ),
    )
}

struct Shots {
    points: Vec<IqPoint>,
    labels: Vec<QubitState>,
}

fn acquire_shots(
    readout: &ReadoutServer,
    profile: &DigitizerProfile,
    n: usize,
    first_seq: u32,
) -> Shots {
    let mut cfg = DigitizerConfig::new(profile.clone(), readout.stream_addr());
    cfg.first_trigger_seq = first_seq;
    cfg.max_triggers = Some(n as u64 + 64);
    let dig = DigitizerEmulator::spawn("127.0.0.1:0", cfg).unwrap();
    let (acq, _) = readout
        .acquire(n, AcquireMode::Iq, None, Duration::from_secs(120), true)
        .unwrap();
    dig.stop();
    Shots {
        labels: acq.seqs.iter().map(|&s| profile.state_for(s)).collect(),
        points: acq.points,
    }
}

struct Discrimination {
    shots: usize,
    errors: usize,
    analytic: f64,
    oracle_mismatch: usize,
    ties: usize,
}

/// Trains on one acquisition, evaluates on a second, and compares the
/// empirical error with the two-Gaussian model along the decision normal.
fn discrimination_run(profile: &DigitizerProfile, per_state: usize) -> Discrimination {
    let readout = ReadoutServer::spawn("127.0.0.1:0", IngestOptions::default()).unwrap();
    readout
        .configure(AcquisitionConfig {
            inputs: vec![InputBinding {
                name: "q".into(),
                device_id: profile.device_id,
                channel_id: profile.channel_id,
            }],
            record_length: profile.record_length,
            sample_rate: profile.sample_rate,
            demod_freq: profile.carrier_freq,
            fir: None,
        })
        .unwrap();
    let train = acquire_shots(&readout, profile, 4000, 0);
    let split = |s: &Shots, want: QubitState| -> Vec<IqPoint> {
        s.points
            .iter()
            .zip(&s.labels)
            .filter(|(_, &l)| l == want)
            .map(|(p, _)| *p)
            .collect()
    };
    let (t0, t1) = (
        split(&train, QubitState::Zero),
        split(&train, QubitState::One),
    );
    let d = train_discriminator(&t0, &t1).unwrap();
    let centroid = |pts: &[IqPoint]| {
        let n = pts.len() as f64;
        IqPoint::new(
            pts.iter().map(|p| p.i).sum::<f64>() / n,
            pts.iter().map(|p| p.q).sum::<f64>() / n,
        )
    };
    let (c0, c1) = (centroid(&t0), centroid(&t1));

    let eval = acquire_shots(&readout, profile, 2 * per_state, 1_000_000);
    let mut errors = 0;
    let mut oracle_mismatch = 0;
    let mut ties = 0;
    for (p, &label) in eval.points.iter().zip(&eval.labels) {
        let got = d.classify(*p);
        errors += usize::from(got != label);
        let d0 = (p.i - c0.i).powi(2) + (p.q - c0.q).powi(2);
        let d1 = (p.i - c1.i).powi(2) + (p.q - c1.q).powi(2);
        if (d0 - d1).abs() <= 1e-12 * (d0 + d1) {
            ties += 1;
            continue;
        }
        let oracle = if d1 < d0 {
            QubitState::One
        } else {
            QubitState::Zero
        };
        oracle_mismatch += usize::from(oracle != got);
    }
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let class_error = |state: QubitState| {
        let scores: Vec<f64> = eval
            .points
            .iter()
            .zip(&eval.labels)
            .filter(|(_, &l)| l == state)
            .map(|(p, _)| d.score(*p))
            .collect();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let tail = std_normal.cdf(-mean.abs() / sd);
        let centroid = centroid(&split(&eval, state));
        if d.classify(centroid) == state {
            tail
        } else {
            1.0 - tail
        }
    };
    Discrimination {
        shots: eval.points.len(),
        errors,
        analytic: 0.5 * (class_error(QubitState::Zero) + class_error(QubitState::One)),
        oracle_mismatch,
        ties,
    }
}

// 9
fn end_to_end_discrimination() -> Verdict {
    let base = DigitizerProfile {
        record_length: 1000,
        trigger_interval: Duration::from_micros(100),
        phase_zero: 0.0,
        phase_one: PI / 2.0,
        noise_sigma: 0.1,
        seed: 9,
        ..DigitizerProfile::default()
    };
    let main = discrimination_run(&base, 10_000);
    let empirical = main.errors as f64 / main.shots as f64;
    let expected_count = main.analytic * main.shots as f64;
    // With ~1000-sample integration the states sit hundreds of sd apart; the
    // model then predicts far less than one error in the whole run.
    let main_ok = if expected_count < 1.0 {
        main.errors <= 3
    } else {
        empirical <= 2.0 * main.analytic && empirical >= 0.5 * main.analytic
    };

    // Same noise and phases, amplitude lowered until errors are countable.
    let low = DigitizerProfile {
        amplitude: 0.017,
        record_length: 200,
        trigger_interval: Duration::from_micros(50),
        seed: 10,
        ..base.clone()
    };
    let weak = discrimination_run(&low, 10_000);
    let weak_emp = weak.errors as f64 / weak.shots as f64;
    let weak_ok = weak_emp <= 2.0 * weak.analytic && weak_emp >= 0.5 * weak.analytic;
    let oracle_ok = main.oracle_mismatch == 0 && weak.oracle_mismatch == 0;
    Verdict::new(
        main_ok && weak_ok && oracle_ok && main.shots == 20_000 && weak.shots == 20_000,
        format!(
            "sigma 0.1, phases 0 / pi/2, 10^4 shots per state: empirical error {empirical:.2e} ({} errors) vs analytic {:.2e}; \
             nearest-centroid label mismatches {}",
            main.errors, main.analytic, main.oracle_mismatch + weak.oracle_mismatch
        ),
    )
    .note(format!(
        "1000-sample records at amplitude 0.8: model predicts {expected_count:.1e} errors, so the factor-2 test is applied to a countable run below"
    ))
    .note(format!(
        "200-sample records at amplitude 0.017: empirical {weak_emp:.4} vs analytic {:.4} (ratio {:.3}, bound [0.5, 2])",
        weak.analytic,
        weak_emp / weak.analytic
    ))
    .note(format!("boundary ties excluded from the oracle comparison: {}", main.ties + weak.ties))
}

fn random_command(r: &mut ChaCha8Rng) -> Command {
    match r.random_range(0..8) {
        0 => Command::UploadWave {
            slot: r.random(),
            codes: (0..r.random_range(0..300)).map(|_| r.random()).collect(),
        },
        1 => Command::SetOffset {
            channel: r.random(),
            code: r.random(),
        },
        2 => Command::SetDelay {
            channel: r.random(),
            samples: r.random(),
        },
        3 => Command::SetTrig { mode: r.random() },
        4 => Command::Play {
            channel: r.random(),
            slot: r.random(),
        },
        5 => Command::DcSet {
            channel: r.random(),
            microvolts: r.random(),
        },
        6 => Command::ReadWave { slot: r.random() },
        _ => Command::Ping,
    }
}

// 10
fn protocol_golden() -> Verdict {
    let mut r = rng(10);
    let mut frame_fail = 0;
    let mut msg_fail = 0;
    for _ in 0..1000 {
        let count = r.random_range(1..=u16::MAX);
        let f = Frame {
            channel_id: r.random(),
            device_id: r.random(),
            trigger_seq: r.random(),
            frame_index: r.random_range(0..count),
            frame_count: count,
            samples: (0..r.random_range(0..=MAX_SAMPLES_PER_FRAME))
                .map(|_| r.random_range(-2048..=2047))
                .collect(),
        };
        let bytes = encode_frame(&f).unwrap();
        frame_fail += usize::from(
            decode_frame(&bytes).ok().as_ref() != Some(&f)
                || bytes.len() != 16 + 2 * f.samples.len(),
        );

        let cmd = random_command(&mut r);
        let msg = cmd.to_message(r.random());
        let bytes = encode_message(&msg);
        let ok = match decode_message(&bytes) {
            Ok((m, used)) => {
                used == bytes.len()
                    && m == msg
                    && Command::from_message(&m).ok() == Some(cmd.clone())
            }
            Err(_) => false,
        };
        msg_fail += usize::from(!ok);
    }

    let dc = encode_message(
        &Command::DcSet {
            channel: 1,
            microvolts: 1_250_000,
        }
        .to_message(7),
    );
    let dc_want = [
        0x0D, 0x00, 0x00, 0x00, 0x10, 0x00, 0x07, 0x00, 0x01, 0xD0, 0x12, 0x13, 0x00, 0x00, 0x00,
        0x00, 0x00,
    ];
    let ping = encode_message(&Command::Ping.to_message(1));
    let ping_want = [0x04, 0x00, 0x00, 0x00, 0xFF, 0x00, 0x01, 0x00];
    let minimal = encode_frame(&Frame {
        channel_id: 2,
        device_id: 0x0102,
        trigger_seq: 0x0A0B_0C0D,
        frame_index: 0,
        frame_count: 1,
        samples: vec![-2048],
    })
    .unwrap();
    let minimal_want = [
        0x51, 0x44, 0x01, 0x02, 0x02, 0x01, 0x0D, 0x0C, 0x0B, 0x0A, 0x00, 0x00, 0x01, 0x00, 0x01,
        0x00, 0x00, 0xF8,
    ];
    let bad_magic = {
        let mut b = minimal.clone();
        b[1] = 0x45;
        decode_frame(&b).is_err()
    };
    let golden_ok = dc == dc_want && ping == ping_want && minimal == minimal_want && bad_magic;
    let truncated = decode_message(&dc[..dc.len() - 1]).is_err();
    let raw_rt = {
        let m = WireMessage::new(0x7777, 0xBEEF, vec![9, 8, 7]);
        decode_message(&encode_message(&m))
            .map(|(x, _)| x == m)
            .unwrap_or(false)
    };
    Verdict::new(
        frame_fail == 0 && msg_fail == 0 && golden_ok && truncated && raw_rt,
        format!(
            "1000 random frames: {frame_fail} failures; 1000 random messages: {msg_fail} failures; golden vectors {}",
            if golden_ok { "match byte-for-byte" } else { "MISMATCH" }
        ),
    )
    .note("golden: DC_SET ch 1 1,250,000 µV rid 7 (17 bytes), PING rid 1 (8 bytes), 1-sample frame of -2048 (18 bytes ending 00 F8)")
    .note("the DC_SET body tail is D0 12 13 00 00 00 00 00 = 1,250,000 as i64 LE")
}

struct Rig {
    _awgs: Vec<AwgEmulator>,
    control: RpcServer,
    readout: Arc<ReadoutServer>,
    readout_rpc: RpcServer,
}

fn rig() -> Rig {
    let awgs: Vec<AwgEmulator> = (0..2)
        .map(|_| AwgEmulator::spawn("127.0.0.1:0", AwgConfig::default()).unwrap())
        .collect();
    let control = Arc::new(ControlServer::new(ControlConfig {
        devices: awgs
            .iter()
            .enumerate()
            .map(|(i, a)| (i as u16 + 1, a.local_addr()))
            .collect(),
        ..ControlConfig::default()
    }));
    let readout = Arc::new(ReadoutServer::spawn("127.0.0.1:0", IngestOptions::default()).unwrap());
    Rig {
        _awgs: awgs,
        control: RpcServer::spawn("127.0.0.1:0", control).unwrap(),
        readout_rpc: RpcServer::spawn("127.0.0.1:0", readout.clone()).unwrap(),
        readout,
    }
}

fn quiet_profile(record_length: usize) -> DigitizerProfile {
    DigitizerProfile {
        record_length,
        trigger_interval: Duration::from_micros(200),
        ..DigitizerProfile::default()
    }
}

/// Streams exactly `n` triggers into the rig and waits until all are queued.
fn fill(readout: &ReadoutServer, profile: DigitizerProfile, n: u64) {
    let mut cfg = DigitizerConfig::new(profile, readout.stream_addr());
    cfg.max_triggers = Some(n);
    DigitizerEmulator::spawn("127.0.0.1:0", cfg).unwrap().join();
    let deadline = Instant::now() + Duration::from_secs(10);
    while readout.engine().queue().len() < n as usize && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(5));
    }
}

fn acquire_config(record_length: usize) -> Value {
    json!({
        "inputs": [{"name": "q0", "device_id": 0, "channel_id": 0}],
        "record_length": record_length,
        "sample_rate": 1e9,
        "demod_freq": 50e6,
    })
}

// 11
fn manager_transparency() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let disc = dir.path().join("disc.txt");
    let (direct, via) = (rig(), rig());
    let routes = [
        ("control".to_string(), via.control.local_addr()),
        ("readout".to_string(), via.readout_rpc.local_addr()),
    ]
    .into_iter()
    .collect();
    let manager = Manager::spawn("127.0.0.1:0", routes, ManagerOptions::default()).unwrap();
    for r in [&direct, &via] {
        fill(&r.readout, quiet_profile(1000), 82);
    }

    let t = Duration::from_secs(30);
    let mut dc = RpcClient::connect(direct.control.local_addr(), t).unwrap();
    let mut dr = RpcClient::connect(direct.readout_rpc.local_addr(), t).unwrap();
    let mut m = RpcClient::connect(manager.local_addr(), t).unwrap();
    let script: Vec<Value> = vec![
        json!({"target": "control", "method": "ping"}),
        json!({"target": "control", "method": "bind_channel", "params": {"virtual_channel": "Q0.X", "device_id": 1, "physical_channel": 0, "kind": "waveform", "latency_samples": 8}}),
        json!({"target": "control", "method": "bind_channel", "params": {"virtual_channel": "Q0.Z", "device_id": 2, "physical_channel": 0, "kind": "waveform", "latency_samples": 20}}),
        json!({"target": "control", "method": "bind_channel", "params": {"virtual_channel": "flux", "device_id": 2, "physical_channel": 1, "kind": "dc"}}),
        json!({"target": "control", "method": "bind_channel", "params": {"virtual_channel": "dup", "device_id": 1, "physical_channel": 0, "kind": "waveform"}}),
        json!({"target": "control", "method": "configure_channel", "params": {"virtual_channel": "Q0.X", "config": {"role": "X", "gain": 0.9, "offset": 0.01}}}),
        json!({"target": "control", "method": "align_timing"}),
        json!({"target": "control", "method": "list_channels"}),
        json!({"target": "control", "method": "define_wave", "params": {"slot": 3, "expr": "gauss(mu=3e-6,sigma=5e-7)"}}),
        json!({"target": "control", "method": "define_wave", "params": {"slot": 4, "expr": "gauss(mu=3e-6"}}),
        json!({"target": "control", "method": "write_wave", "params": {"virtual_channel": "Q0.X", "slot": 3}}),
        json!({"target": "control", "method": "write_wave", "params": {"virtual_channel": "Q0.Z", "expr": "flattop(a=0.4,sigma=5e-8,t1=1e-6,t2=4e-6)", "length": 5000}}),
        json!({"target": "control", "method": "read_wave", "params": {"virtual_channel": "Q0.Z"}}),
        json!({"target": "control", "method": "set_dc", "params": {"virtual_channel": "flux", "volts": 1.25}}),
        json!({"target": "control", "method": "set_dc", "params": {"virtual_channel": "flux", "volts": 12}}),
        json!({"target": "control", "method": "play_all", "params": {"trigger_mode": 1}}),
        json!({"target": "control", "method": "unbind_channel", "params": {"virtual_channel": "flux"}}),
        json!({"target": "control", "method": "fly"}),
        json!({"target": "readout", "method": "ping"}),
        json!({"target": "readout", "method": "configure", "params": acquire_config(1000)}),
        json!({"target": "readout", "method": "acquire", "params": {"n": "ten", "mode": "state"}}),
        json!({"target": "readout", "method": "acquire", "params": {"n": 40, "mode": "iq", "fresh": false}}),
        json!({"target": "readout", "method": "acquire", "params": {"n": 4, "mode": "state", "fresh": false}}),
        json!({"target": "readout", "method": "train", "params": {"zero": [[0.8, 0.0], [0.79, 0.01]], "one": [[0.0, -0.8], [0.01, -0.79]]}}),
        json!({"target": "readout", "method": "classify", "params": {"points": [[0.7, 0.1], [0.1, -0.7]]}}),
        json!({"target": "readout", "method": "acquire", "params": {"n": 36, "mode": "state", "fresh": false}}),
        json!({"target": "readout", "method": "acquire", "params": {"n": 2, "mode": "raw", "fresh": false}}),
        json!({"target": "readout", "method": "save_discriminator", "params": {"path": disc}}),
        json!({"target": "readout", "method": "load_discriminator", "params": {"path": disc}}),
        json!({"target": "readout", "method": "stats"}),
        json!({"target": "nowhere", "method": "ping"}),
    ];
    // steps expected to answer with an error object
    let failing = [4, 9, 14, 17, 20, 22];
    let mut mismatches = Vec::new();
    let mut methods = std::collections::BTreeSet::new();
    for (k, step) in script.iter().enumerate() {
        let mut line = step.clone();
        line["id"] = json!(k);
        let text = line.to_string();
        let target = step["target"].as_str().unwrap();
        methods.insert(format!("{target}.{}", step["method"].as_str().unwrap()));
        let via_reply = m.call_raw(&text, t).unwrap();
        if target == "nowhere" {
            if !via_reply.contains("unknown-target") {
                mismatches.push(format!("{text} -> {via_reply}"));
            }
            continue;
        }
        let direct_reply = if target == "control" {
            &mut dc
        } else {
            &mut dr
        }
        .call_raw(&text, t)
        .unwrap();
        let is_error = serde_json::from_str::<Value>(&direct_reply)
            .unwrap()
            .get("error")
            .is_some();
        if is_error != failing.contains(&k) {
            mismatches.push(format!("unexpected outcome for {text}: {direct_reply}"));
        }
        if direct_reply != via_reply {
            mismatches.push(format!(
                "{text}\n           direct {direct_reply}\n           via    {via_reply}"
            ));
        }
    }
    let transparent = mismatches.is_empty();

    // economy: iq/state reply size against record length and trigger count
    let size = |record_length: usize, n: usize, mode: &str| -> usize {
        let r = rig();
        let mut c = RpcClient::connect(r.readout_rpc.local_addr(), t).unwrap();
        c.call("readout", "configure", acquire_config(record_length), t)
            .unwrap();
        c.call(
            "readout",
            "train",
            json!({"zero": [[0.8, 0.0]], "one": [[0.0, -0.8]]}),
            t,
        )
        .unwrap();
        fill(&r.readout, quiet_profile(record_length), n as u64);
        let line = json!({"id": 1, "target": "readout", "method": "acquire", "params": {"n": n, "mode": mode, "fresh": false}});
        c.call_raw(&line.to_string(), t).unwrap().len()
    };
    let mut economy = true;
    let mut notes = Vec::new();
    for mode in ["iq", "state"] {
        let small = size(1000, 100, mode);
        let long = size(10_000, 100, mode);
        let double = size(1000, 200, mode);
        let len_ratio = long as f64 / small as f64;
        let n_ratio = double as f64 / small as f64;
        economy &= (0.9..=1.1).contains(&len_ratio) && (1.6..=2.4).contains(&n_ratio);
        notes.push(format!(
            "{mode}: 100 triggers {small} B at 1k samples, {long} B at 10k samples (x{len_ratio:.2}); 200 triggers {double} B (x{n_ratio:.2})"
        ));
    }
    let raw = size(1000, 10, "raw");
    notes.push(format!(
        "info: raw mode for 10 triggers of 1k samples is {raw} B"
    ));

    let mut v = Verdict::new(
        transparent && economy,
        format!(
            "{} requests over {} methods byte-identical via manager: {}; iq/state reply size O(n) and independent of record length: {economy}",
            script.len(),
            methods.len(),
            if transparent { "yes".to_string() } else { format!("{} differ", mismatches.len()) }
        ),
    );
    for n in notes.into_iter().chain(mismatches) {
        v = v.note(n);
    }
    v
}

type Criterion = (u32, &'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let filter: Option<Vec<u32>> = std::env::args()
        .skip(1)
        .find(|a| !a.starts_with('-'))
        .map(|s| s.split(',').filter_map(|x| x.parse().ok()).collect());
    let wanted = |id: u32| filter.as_ref().is_none_or(|f| f.contains(&id));
    let criteria: [Criterion; 11] = [
        (1, "waveform generation timing", generation_timing),
        (2, "multi-device transmission scaling", transmission_scaling),
        (3, "digitizer ingest throughput", ingest_throughput),
        (4, "real-time acquisition", realtime_acquisition),
        (5, "homodyne correctness", homodyne_correctness),
        (6, "flattop identity", flattop_identity),
        (7, "calculus inverse pair", calculus_pair),
        (8, "reassembly properties", reassembly_properties),
        (9, "end-to-end discrimination", end_to_end_discrimination),
        (10, "protocol golden bytes", protocol_golden),
        (11, "manager transparency and economy", manager_transparency),
    ];
    // Criteria 1-4 time this host. They gate the exit status only when
    // QCTRL_ACCEPTANCE_STRICT is set; their PASS/FAIL lines print either way.
    let strict = std::env::var_os("QCTRL_ACCEPTANCE_STRICT").is_some();
    let mut failed = Vec::new();
    for (id, title, f) in criteria {
        if wanted(id) && !run(id, title, f) {
            failed.push(id);
        }
    }
    let gating: Vec<u32> = failed
        .iter()
        .copied()
        .filter(|&id| strict || id > 4)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
    }
    if gating.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
