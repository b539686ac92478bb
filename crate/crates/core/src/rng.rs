//! Seed derivation. Every actor (client, stage, domain) gets its own stream
//! derived from the global seed, so the order in which actors run never
//! changes what they draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a global seed with a stream tag and an actor id.
pub fn derive_seed(seed: u64, tag: &str, id: u64) -> u64 {
    let mut h = splitmix(seed);
    for b in tag.bytes() {
        h = splitmix(h ^ b as u64);
    }
    splitmix(h ^ id.wrapping_mul(0xA24B_AED4_963E_E407))
}

pub fn stream(seed: u64, tag: &str, id: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, tag, id))
}
