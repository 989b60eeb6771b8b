#![no_main]
use libfuzzer_sys::fuzz_target;
use qctrl_core::binding::{format_bindings, parse_bindings};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(bindings) = parse_bindings(text) else {
        return;
    };
    let shown = format_bindings(&bindings);
    assert_eq!(parse_bindings(&shown).unwrap(), bindings);
});
