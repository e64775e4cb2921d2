//! Named random sub-streams.
//!
//! Every random decision in the workbench is drawn from a stream derived from
//! a single experiment seed and a stream name (`"data"`, `"init"`,
//! `"shuffle"`, `"attack"`, ...), so components can be re-run in isolation
//! without consuming each other's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream names used across the crate.
pub mod streams {
    pub const DATA: &str = "data";
    pub const SPLIT: &str = "split";
    pub const INIT: &str = "init";
    pub const SHUFFLE: &str = "shuffle";
    pub const AUGMENT: &str = "augment";
    pub const ATTACK: &str = "attack";
    pub const ATTACK_DATA: &str = "attack-data";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for `(seed, name)`. FNV-1a over the name, mixed with
/// the seed through splitmix64; independent of platform and Rust version.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Generator for the named stream.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, name))
}

/// Generator for the `index`-th sub-stream of a named stream (per-trace or
/// per-epoch streams). Counter based: the result does not depend on how many
/// other sub-streams were used before.
pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = stream(seed, name);
    rng.set_stream(index);
    rng
}
