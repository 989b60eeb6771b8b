#![no_main]
use libfuzzer_sys::fuzz_target;
use qctrl_core::kvconfig::KvConfig;
use qctrl_core::synth::{parse_schedule, DigitizerProfile};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_schedule(text);
    let Ok(kv) = KvConfig::parse(text) else {
        return;
    };
    if let Ok(p) = DigitizerProfile::from_kv(&kv) {
        let kv2 = KvConfig::parse(&p.to_kv_text()).expect("printed profile parses");
        assert!(DigitizerProfile::from_kv(&kv2).is_ok());
    }
});
