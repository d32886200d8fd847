#![no_main]
use coop_core::model::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(ckpt.to_bytes(), data);
    }
});
