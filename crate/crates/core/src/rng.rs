//! Seed derivation for independent, order-free random streams.
//!
//! Every stochastic decision draws from a ChaCha stream keyed by the run
//! seed plus a purpose tag and indices (round, client). Results therefore
//! do not depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Partition = 2,
    ClientSampling = 3,
    Dropout = 4,
    Client = 5,
    Probe = 6,
    Synth = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut acc = splitmix(seed ^ splitmix(stream as u64));
    for &p in path {
        acc = splitmix(acc ^ splitmix(p.wrapping_add(0x51_7CC1_B727_220A)));
    }
    acc
}

pub fn stream_rng(seed: u64, stream: Stream, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, path))
}
