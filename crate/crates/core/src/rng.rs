//! Counter-based random streams.
//!
//! Every consumer of randomness (a receiver's selector at a given step, the
//! reparameterization noise of one batch, the projection kernel, ...) derives
//! its own ChaCha stream from the run seed plus a tuple of tags. Two callers
//! that ask for the same tags get the same stream, independent of how many
//! draws other parts of the program made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains. Keeping them distinct guarantees that e.g. the data
/// generator and the selectors never alias a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Data = 2,
    CommonRandomness = 3,
    Selection = 4,
    Projection = 5,
    Reparam = 6,
    Batching = 7,
    Eval = 8,
    Inference = 9,
    Oracle = 10,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a reproducible stream for `(seed, domain, tags...)`.
pub fn stream(seed: u64, domain: Domain, tags: &[u64]) -> StreamRng {
    let mut key = splitmix(seed ^ (domain as u64).rotate_left(32));
    for &t in tags {
        key = splitmix(key ^ t);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(domain as u64);
    rng
}
