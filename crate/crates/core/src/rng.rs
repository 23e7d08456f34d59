//! Deterministic RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha stream derived from a
//! root seed plus a short list of integer labels (step index, trial, sample
//! id, ...). Streams are independent of each other and of draw order, so any
//! piece of the pipeline can be re-run — or run in parallel — and still
//! produce bit-identical results for a given seed.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapse a root seed and a list of labels into one derived seed.
///
/// Label order matters: `(a, b)` and `(b, a)` derive different seeds.
pub fn derive_seed(root: u64, labels: &[u64]) -> u64 {
    let mut acc = mix(root);
    for &label in labels {
        acc = mix(acc ^ mix(label));
    }
    acc
}

/// An independent ChaCha stream for `(root, labels)`.
pub fn stream(root: u64, labels: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, labels))
}
