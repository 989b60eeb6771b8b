#![no_main]
use libfuzzer_sys::fuzz_target;
use qctrl_core::waveform::{differentiate_expr, parse_expr};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(e) = parse_expr(text) else { return };
    let shown = e.to_string();
    let again = parse_expr(&shown).expect("printed expression reparses");
    assert_eq!(again.to_string(), shown);
    let _ = differentiate_expr(&e);
});
