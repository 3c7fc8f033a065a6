//! Seeded random streams. Every consumer derives its own stream from the run seed and a name,
//! so adding draws to one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream for `name` under `seed`, mixed with FNV-1a and a splitmix finalizer.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    Rng::seed_from_u64(z)
}

/// Sub-stream of `name` for one epoch.
pub fn epoch_stream(seed: u64, name: &str, epoch: usize) -> Rng {
    stream(seed, &format!("{name}/{epoch}"))
}
