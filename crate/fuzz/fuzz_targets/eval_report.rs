#![no_main]
use coop_core::evaluation::EvalReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = EvalReport::from_json(text) {
        assert_eq!(EvalReport::from_json(&r.to_json()).expect("re-parse"), r);
    }
});
