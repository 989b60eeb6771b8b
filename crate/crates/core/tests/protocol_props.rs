use std::time::{Duration, Instant};

use proptest::prelude::*;
use qctrl_core::datalink::{
    decode_frame, encode_frame, fragment_record, Frame, Reassembler, MAX_SAMPLES_PER_FRAME,
    SAMPLE_MAX, SAMPLE_MIN,
};
use qctrl_core::wire::{decode_message, encode_message, Command, WireMessage};

fn codes(max: usize) -> impl Strategy<Value = Vec<i16>> {
    prop::collection::vec(SAMPLE_MIN..=SAMPLE_MAX, 1..=max)
}

fn frame() -> impl Strategy<Value = Frame> {
    (
        any::<u8>(),
        any::<u16>(),
        any::<u32>(),
        1u16..=u16::MAX,
        codes(MAX_SAMPLES_PER_FRAME),
    )
        .prop_flat_map(
            |(channel_id, device_id, trigger_seq, frame_count, samples)| {
                (0..frame_count).prop_map(move |frame_index| Frame {
                    channel_id,
                    device_id,
                    trigger_seq,
                    frame_index,
                    frame_count,
                    samples: samples.clone(),
                })
            },
        )
}

fn command() -> impl Strategy<Value = Command> {
    prop_oneof![
        (any::<u16>(), prop::collection::vec(any::<i16>(), 0..2000))
            .prop_map(|(slot, codes)| Command::UploadWave { slot, codes }),
        (any::<u8>(), any::<i16>())
            .prop_map(|(channel, code)| Command::SetOffset { channel, code }),
        (any::<u8>(), any::<u32>())
            .prop_map(|(channel, samples)| Command::SetDelay { channel, samples }),
        any::<u8>().prop_map(|mode| Command::SetTrig { mode }),
        (any::<u8>(), any::<u16>()).prop_map(|(channel, slot)| Command::Play { channel, slot }),
        (any::<u8>(), any::<i64>()).prop_map(|(channel, microvolts)| Command::DcSet {
            channel,
            microvolts
        }),
        any::<u16>().prop_map(|slot| Command::ReadWave { slot }),
        Just(Command::Ping),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn frame_round_trip(f in frame()) {
        let bytes = encode_frame(&f).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 2 * f.samples.len());
        prop_assert_eq!(decode_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn command_round_trip(c in command(), rid in any::<u16>()) {
        let m = c.to_message(rid);
        let bytes = encode_message(&m);
        let (back, used) = decode_message(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(Command::from_message(&back).unwrap(), c);
    }

    #[test]
    fn raw_message_round_trip(op in any::<u16>(), rid in any::<u16>(), body in prop::collection::vec(any::<u8>(), 0..512)) {
        let m = WireMessage::new(op, rid, body);
        let bytes = encode_message(&m);
        prop_assert_eq!(decode_message(&bytes).unwrap(), (m, bytes.len()));
    }
}

fn record_frames(seq: u32, samples: &[i16]) -> Vec<Frame> {
    fragment_record(3, 1, seq, samples).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn reassembly_is_permutation_invariant(
        samples in codes(6 * MAX_SAMPLES_PER_FRAME),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut frames = record_frames(7, &samples);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        frames.shuffle(&mut rng);
        let mut r = Reassembler::default();
        let mut out: Vec<_> = frames.into_iter().filter_map(|f| r.ingest(f)).collect();
        prop_assert_eq!(out.len(), 1);
        let rec = out.pop().unwrap();
        prop_assert!(rec.is_usable());
        prop_assert_eq!(rec.samples, samples);
        prop_assert_eq!(r.pending(), 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn duplicates_are_idempotent(samples in codes(4 * MAX_SAMPLES_PER_FRAME), dups in prop::collection::vec(any::<prop::sample::Index>(), 1..10)) {
        let frames = record_frames(1, &samples);
        let mut stream = frames.clone();
        for d in &dups {
            stream.insert(d.index(stream.len() + 1).min(stream.len()), frames[d.index(frames.len())].clone());
        }
        let mut r = Reassembler::default();
        let out: Vec<_> = stream.into_iter().filter_map(|f| r.ingest(f)).collect();
        prop_assert_eq!(out.len(), 1);
        prop_assert_eq!(&out[0].samples, &samples);
        prop_assert!(out[0].is_usable());
    }

    #[test]
    fn loss_is_detected_and_samples_conserved(
        samples in codes(8 * MAX_SAMPLES_PER_FRAME),
        drop in prop::collection::vec(any::<bool>(), 8),
    ) {
        let frames = record_frames(9, &samples);
        let kept: Vec<Frame> = frames.iter().enumerate().filter(|(i, _)| !drop[*i]).map(|(_, f)| f.clone()).collect();
        let expected_missing: Vec<u16> = (0..frames.len()).filter(|i| drop[*i]).map(|i| i as u16).collect();
        let ingested: usize = kept.iter().map(|f| f.samples.len()).sum();

        let t0 = Instant::now();
        let mut r = Reassembler::default();
        let mut out: Vec<_> = kept.into_iter().filter_map(|f| r.ingest_at(f, t0)).collect();
        out.extend(r.flush(t0 + Duration::from_millis(10), Duration::from_millis(5)));
        if expected_missing.is_empty() {
            prop_assert_eq!(out.len(), 1);
            prop_assert!(out[0].complete);
        } else if expected_missing.len() == frames.len() {
            prop_assert!(out.is_empty());
        } else {
            prop_assert_eq!(out.len(), 1);
            prop_assert!(!out[0].complete);
            prop_assert_eq!(&out[0].missing, &expected_missing);
        }
        let emitted: usize = out.iter().map(|r| r.samples.len()).sum();
        prop_assert_eq!(emitted, ingested);
        let s = r.stats();
        prop_assert_eq!(s.samples_emitted, s.samples_ingested);
    }
}
