//! Seed fan-out.
//!
//! Every random stream in a run is derived from the master seed with
//! [`derive_seed`], keyed by a purpose tag, the round index and the client id.
//! Each key component is folded in with a SplitMix64 finalizer, so adding
//! clients or rounds never perturbs the stream of an unrelated
//! (purpose, round, client) triple.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers for [`derive_seed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Sampling = 2,
    LocalShuffle = 3,
    DpNoise = 4,
    Partition = 5,
    Synthetic = 6,
    AttackInit = 7,
    AttackTargets = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `h = sm(sm(sm(sm(seed) ^ purpose) ^ round) ^ client)`.
pub fn derive_seed(master: u64, purpose: Purpose, round: u64, client: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ round);
    splitmix64(h ^ client)
}

pub fn stream(master: u64, purpose: Purpose, round: u64, client: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, round, client))
}
