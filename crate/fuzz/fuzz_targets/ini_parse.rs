#![no_main]
use coop_core::harness::ini::IniDocument;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = IniDocument::parse(text);
    }
});
