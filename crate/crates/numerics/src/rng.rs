//! Counter-based random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, label)`, so
//! independent jobs never share generator state and the draw order of one job
//! cannot perturb another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stream keyed by `seed`, selected by `label`.
pub fn stream(seed: u64, label: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

/// Stream keyed by `seed`, selected by `label` and an integer index.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> Rng {
    let mut key = label.as_bytes().to_vec();
    key.push(0);
    key.extend_from_slice(&index.to_le_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(&key));
    rng
}
