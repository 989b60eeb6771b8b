use std::time::Duration;

use qctrl_core::datalink::Record;
use qctrl_core::readout::QubitState;
use qctrl_core::synth::{synth_readout_trace, DigitizerProfile};
use qctrl_net::emu::digitizer::{DigitizerConfig, DigitizerEmulator};
use qctrl_net::ingest::{IngestEngine, IngestOptions};

fn profile(record_length: usize, triggers_per_sec: u64) -> DigitizerProfile {
    DigitizerProfile {
        record_length,
        trigger_interval: Duration::from_nanos(1_000_000_000 / triggers_per_sec),
        ..DigitizerProfile::default()
    }
}

fn engine(flush_age: Duration) -> IngestEngine {
    IngestEngine::spawn(
        "127.0.0.1:0",
        IngestOptions {
            flush_age,
            ..IngestOptions::default()
        },
    )
    .unwrap()
}

fn collect(engine: &IngestEngine, n: usize) -> Vec<Record> {
    let mut out = Vec::new();
    while out.len() < n {
        match engine.queue().pop_timeout(Duration::from_secs(5)) {
            Some(r) => out.push(r),
            None => break,
        }
    }
    out.sort_by_key(|r| r.key.trigger_seq);
    out
}

#[test]
fn ten_thousand_sample_record_is_fourteen_frames() {
    let ing = engine(Duration::from_millis(200));
    let mut cfg = DigitizerConfig::new(profile(10_000, 1000), ing.local_addr());
    cfg.max_triggers = Some(5);
    let stats = DigitizerEmulator::spawn("127.0.0.1:0", cfg).unwrap().join();
    assert_eq!(stats.triggers, 5);
    assert_eq!(stats.frames_sent, 70);
    let recs = collect(&ing, 5);
    assert_eq!(recs.len(), 5);
    for r in &recs {
        assert!(r.is_usable());
        assert_eq!(r.frame_count, 14);
        assert_eq!(r.samples.len(), 10_000);
    }
}

#[test]
fn records_match_the_synthesized_traces() {
    let p = profile(2000, 1000);
    let ing = engine(Duration::from_millis(200));
    let mut cfg = DigitizerConfig::new(p.clone(), ing.local_addr());
    cfg.max_triggers = Some(6);
    DigitizerEmulator::spawn("127.0.0.1:0", cfg).unwrap().join();
    let recs = collect(&ing, 6);
    assert_eq!(recs.len(), 6);
    for r in &recs {
        let seq = r.key.trigger_seq;
        let want = synth_readout_trace(&p, p.state_for(seq), p.trigger_seed(seq));
        assert_eq!(r.samples, want, "trigger {seq}");
    }
    assert_eq!(p.state_for(0), QubitState::Zero);
    assert_eq!(p.state_for(1), QubitState::One);
}

#[test]
fn dropped_frame_is_reported_missing() {
    let ing = engine(Duration::from_millis(50));
    let mut cfg = DigitizerConfig::new(profile(10_000, 1000), ing.local_addr());
    cfg.max_triggers = Some(3);
    cfg.drop_frame = Some(5);
    DigitizerEmulator::spawn("127.0.0.1:0", cfg).unwrap().join();
    let recs = collect(&ing, 3);
    assert_eq!(recs.len(), 3);
    for r in &recs {
        assert!(!r.complete);
        assert_eq!(r.missing, vec![5]);
    }
    assert_eq!(ing.stats().reassembly.records_incomplete, 3);
}

#[test]
fn reordering_does_not_change_output() {
    let run = |reorder: f64| {
        let ing = engine(Duration::from_millis(200));
        let mut cfg = DigitizerConfig::new(profile(5000, 500), ing.local_addr());
        cfg.max_triggers = Some(8);
        cfg.reorder_percent = reorder;
        DigitizerEmulator::spawn("127.0.0.1:0", cfg).unwrap().join();
        collect(&ing, 8)
    };
    let plain = run(0.0);
    let shuffled = run(100.0);
    assert_eq!(plain.len(), 8);
    assert_eq!(plain, shuffled);
}

#[test]
fn garbage_datagrams_are_counted_not_fatal() {
    let ing = engine(Duration::from_millis(200));
    let sock = std::net::UdpSocket::bind("127.0.0.1:0").unwrap();
    sock.send_to(b"not a frame", ing.local_addr()).unwrap();
    let mut cfg = DigitizerConfig::new(profile(1000, 1000), ing.local_addr());
    cfg.max_triggers = Some(1);
    DigitizerEmulator::spawn("127.0.0.1:0", cfg).unwrap().join();
    let recs = collect(&ing, 1);
    assert_eq!(recs.len(), 1);
    assert!(recs[0].is_usable());
    assert_eq!(ing.stats().decode_errors, 1);
}
