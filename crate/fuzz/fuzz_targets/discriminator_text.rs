#![no_main]
use libfuzzer_sys::fuzz_target;
use qctrl_core::readout::Discriminator;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(d) = text.parse::<Discriminator>() else {
        return;
    };
    let again: Discriminator = d
        .to_string()
        .parse()
        .expect("printed discriminator reparses");
    assert_eq!(again.to_string(), d.to_string());
});
