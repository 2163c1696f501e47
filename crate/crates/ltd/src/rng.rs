//! Deterministic seeding utilities.
//!
//! Every random decision in the pipeline flows from an explicit `u64` seed
//! through [`derive_seed`], so dataset conversion is independent of iteration
//! order and worker count, and training runs are exactly resumable.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer. Stable across platforms, unlike `DefaultHasher`.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with stream labels (image id, epoch, step, ...).
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    let mut acc = splitmix64(base);
    for &label in labels {
        acc = splitmix64(acc ^ label.wrapping_mul(0xff51_afd7_ed55_8ccd));
    }
    acc
}

/// Deterministic RNG for a given seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller; two uniform draws per call.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
