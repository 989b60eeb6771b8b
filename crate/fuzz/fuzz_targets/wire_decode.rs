#![no_main]
use libfuzzer_sys::fuzz_target;
use qctrl_core::wire::{decode_message, encode_message, read_message, Command};

fuzz_target!(|data: &[u8]| {
    let _ = read_message(&mut &data[..], 1 << 20);
    let Ok((msg, used)) = decode_message(data) else {
        return;
    };
    assert!(used <= data.len());
    assert_eq!(encode_message(&msg), &data[..used]);
    if let Ok(cmd) = Command::from_message(&msg) {
        let back = Command::from_message(&cmd.to_message(msg.request_id)).unwrap();
        assert_eq!(back, cmd);
    }
});
