//! Seed-splitting scheme.
//!
//! All randomness in an experiment flows from one root seed. Sub-experiments
//! (individual transmissions, sweep points, fingerprint runs, ...) draw their
//! own stream from `stream(root, label)`, where the label is a short static
//! string plus any distinguishing integers. Streams are independent of the
//! order in which they are created, so parallel sweep points reproduce the
//! same results as sequential ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable FNV-1a hash of the label; not security relevant, just a
/// platform-independent way to spread labels over the seed space.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the RNG stream `label` from `root`.
pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(root ^ label_hash(label))
}

/// Derive a numbered sub-stream, e.g. one per sweep point or per trial.
pub fn substream(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    stream(root, &format!("{label}#{index}"))
}
