//! Counter-based random streams.
//!
//! Every random draw in training and evaluation comes from a stream keyed by
//! `(run seed, purpose, counters...)`, so results do not depend on the order
//! in which prompts are processed or on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tag mixed into every stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Tasks = 1,
    Batch = 2,
    Sampling = 3,
    Filter = 4,
    Eval = 5,
    RouterLabels = 6,
    Split = 7,
    Init = 8,
    Verify = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from a seed, a purpose and any number of counters.
pub fn derive_key(seed: u64, purpose: Purpose, counters: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(purpose as u64));
    for &c in counters {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, counters: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_key(seed, purpose, counters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Purpose::Sampling, &[1, 2]).random();
        let b: u64 = stream(7, Purpose::Sampling, &[1, 2]).random();
        let c: u64 = stream(7, Purpose::Sampling, &[2, 1]).random();
        let d: u64 = stream(7, Purpose::Filter, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
