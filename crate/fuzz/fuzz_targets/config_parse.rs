#![no_main]
use coop_core::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_ini(text) {
        let again = ExperimentConfig::from_ini(&cfg.to_ini()).expect("serialized config parses");
        assert_eq!(again, cfg);
    }
});
