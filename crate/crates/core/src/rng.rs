//! Seeded random streams. Every random draw in the crate flows from a
//! single `u64` seed through ChaCha8, so runs reproduce bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;

pub type StdRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StdRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` derived from `seed`.
pub fn substream(seed: u64, index: u64) -> StdRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Marsaglia's polar method over `libm`, so draws do not depend on which
/// float backend other crates in the build enable.
pub fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64) -> f64 {
    loop {
        let u = 2.0 * rng.random::<f64>() - 1.0;
        let v = 2.0 * rng.random::<f64>() - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return mean + std * u * math::sqrt(-2.0 * math::ln(s) / s);
        }
    }
}
