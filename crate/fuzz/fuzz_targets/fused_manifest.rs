#![no_main]
use coop_core::fusion::FusedManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = FusedManifest::parse(text) {
        assert_eq!(FusedManifest::parse(&m.to_text()).expect("re-parse"), m);
    }
});
