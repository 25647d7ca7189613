//! Seeded random streams. Every stochastic component takes a stream derived
//! from the run seed plus a purpose key, so results never depend on the
//! order in which clients execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags mixed into derived seeds.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Partition = 2,
    Pretrain = 3,
    ModelInit = 4,
    Client = 5,
    Eval = 6,
    Split = 7,
    Denoiser = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a seed from a base seed and a sequence of keys.
pub fn derive_seed(seed: u64, stream: Stream, keys: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &k in keys {
        h = splitmix(h ^ splitmix(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, keys))
}
