#![no_main]
use libfuzzer_sys::fuzz_target;
use qctrl_core::datalink::{decode_frame, encode_frame, Reassembler};

fuzz_target!(|data: &[u8]| {
    let Ok(frame) = decode_frame(data) else {
        return;
    };
    let bytes = encode_frame(&frame).expect("decoded frame re-encodes");
    assert_eq!(decode_frame(&bytes).unwrap(), frame);
    let mut r = Reassembler::new(4);
    let _ = r.ingest(frame);
    let _ = r.flush_all();
});
