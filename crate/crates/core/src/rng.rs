//! Seed splitting.
//!
//! Every run derives all of its randomness from a single root seed. Each
//! consumer gets its own ChaCha8 stream keyed by the root seed, so changing
//! how many numbers one component draws never perturbs another:
//!
//! | stream | consumer                         |
//! |--------|----------------------------------|
//! | 0      | environment generation (garnet)  |
//! | 1      | critic network initialization    |
//! | 2      | trajectory sampling              |
//! | 3      | feature map construction         |
//! | 4+     | test harnesses / trial streams   |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Environment,
    NetInit,
    Trajectory,
    Features,
    Aux(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Environment => 0,
            Stream::NetInit => 1,
            Stream::Trajectory => 2,
            Stream::Features => 3,
            Stream::Aux(k) => 4 + k,
        }
    }
}

pub fn split(root_seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(stream.id());
    rng
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Inverse-CDF draw from a probability vector. Falls back to the last index
/// with positive mass if rounding leaves `u` past the cumulative total.
pub fn sample_categorical<R: rand::Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}
