//! Every random stream in a run is derived from one root seed plus a label,
//! so each consumer (data, init, shuffling, sampling) is reproducible on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Child seed for the stream named `label`.
pub fn derive(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a(label))
}

/// Child seed for the `index`-th member of a family of streams.
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(root, label) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
