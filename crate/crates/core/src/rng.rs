//! Counter-based random streams.
//!
//! Every random draw is keyed by `(seed, lane, step, purpose)` so results do not
//! depend on how particles are scheduled across worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type handed to every sampling routine.
pub type StreamRng = ChaCha8Rng;

/// What a stream is used for; keeps independent decisions on separate streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Initial = 1,
    Propose = 2,
    Select = 3,
    Resample = 4,
    Rollout = 5,
    Search = 6,
    Refine = 7,
    Chain = 8,
    Fit = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the stream for one `(lane, step, purpose)` cell under `seed`.
pub fn stream(seed: u64, lane: u64, step: u64, purpose: Purpose) -> StreamRng {
    let mut h = splitmix(seed);
    h = splitmix(h ^ lane);
    h = splitmix(h ^ step.rotate_left(21));
    h = splitmix(h ^ (purpose as u64).rotate_left(42));
    ChaCha8Rng::seed_from_u64(h)
}

/// Child seed for a sub-computation (a nested run, a refinement iteration).
pub fn derive_seed(seed: u64, lane: u64, tag: u64) -> u64 {
    splitmix(splitmix(seed ^ 0xA5A5_5A5A_D00D_F00D) ^ splitmix(lane) ^ tag.rotate_left(17))
}
