//! Shared inputs for the benchmarks.

use scaforge_core::synth::{generate, KeyMode, SynthConfig};
use scaforge_core::TraceSet;

/// A random-key synthetic set with the usual masked leak positions.
pub fn traces(n_traces: usize, n_samples: usize) -> TraceSet {
    let cfg = SynthConfig {
        n_traces,
        n_samples,
        sigma: 1.0,
        leak_pos_masked: n_samples / 3,
        leak_pos_mask: 2 * n_samples / 3,
        max_desync: 0,
        key_mode: KeyMode::Random,
        target_byte: 2,
        unprotected: false,
        seed: 7,
    };
    generate(&cfg).expect("valid benchmark config")
}

/// Deterministic pseudo-random score vector.
pub fn scores(seed: u64) -> [f64; 256] {
    let mut s = [0.0; 256];
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    for v in s.iter_mut() {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        *v = (x >> 11) as f64 / (1u64 << 53) as f64;
    }
    s
}
