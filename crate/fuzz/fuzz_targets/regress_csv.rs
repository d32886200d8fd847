#![no_main]
use coop_core::analysis::{parse_points_csv, regression_report};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(points) = parse_points_csv(text) {
        if let Ok(r) = regression_report(&points) {
            assert!(r.fit.r_squared.is_nan() || (0.0..=1.0).contains(&r.fit.r_squared));
        }
    }
});
