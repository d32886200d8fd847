#![no_main]
use coop_core::corpus::{generate_domain, DomainSpec, GeneratorKind};
use libfuzzer_sys::fuzz_target;

// First 10 bytes pick seed, size and context; the rest names the generator.
fuzz_target!(|data: &[u8]| {
    if data.len() < 10 {
        return;
    }
    let seed = u64::from_le_bytes(data[..8].try_into().unwrap());
    let n_chunks = (data[8] % 40) as usize;
    let ctx = (data[9] % 80) as usize;
    let Ok(name) = std::str::from_utf8(&data[10..]) else { return };
    let Ok(kind) = name.parse::<GeneratorKind>() else { return };
    assert_eq!(kind.to_string().parse::<GeneratorKind>().unwrap(), kind);
    if let Ok(c) = generate_domain(&DomainSpec::new("fuzz", kind, seed, n_chunks), ctx) {
        assert_eq!(c.train.len() + c.heldout.len(), n_chunks);
        assert!(c.train.chunks.iter().chain(&c.heldout.chunks).all(|ch| ch.len() == ctx));
    }
});
