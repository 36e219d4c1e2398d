//! Seed scheme for replications.
//!
//! Every replication draws from ChaCha8 generators keyed by the scenario's
//! base seed (expanded with `rand_core`'s `seed_from_u64`). Replication `r`
//! uses stream `4 r + purpose`, where purpose is 0 for covariates, 1 for
//! assignment uniforms, 2 for outcome errors and 3 for the exogenous
//! stream. Streams are counter-based, so any replication can be
//! regenerated on its own and results do not depend on worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SEED_SCHEME: &str = "chacha8(seed_from_u64(base_seed)), stream = 4*r + purpose";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Covariates = 0,
    Assignment = 1,
    Outcomes = 2,
    Exogenous = 3,
}

pub fn stream_rng(base_seed: u64, replication: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(replication.wrapping_mul(4).wrapping_add(purpose as u64));
    rng
}
