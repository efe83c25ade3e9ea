//! One master seed, split into independent deterministic streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_SEED: u64 = 42;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "INTUITION_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    ValidationSample = 2,
    Init = 3,
    Shuffle = 4,
    Codebook = 5,
    Synthetic = 6,
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// The seed from [`SEED_ENV`] if set and parseable.
pub fn seed_from_env() -> Option<u64> {
    std::env::var(SEED_ENV).ok()?.trim().parse().ok()
}
