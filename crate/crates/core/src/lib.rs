//! Batch active learning guided by TrustSets.
//!
//! A small target classifier is trained on the labeled set each round. The
//! labeled samples with the largest (curriculum-weighted) EL2N scores form a
//! class-balanced *TrustSet*. A reward network is then regressed on simulated
//! selection episodes carved out of the labeled set, where the reward of a
//! candidate group is its negative Wasserstein distance to the TrustSet. At
//! query time the network ranks groups of the real unlabeled pool.
//!
//! Module map:
//!
//! - [`dataset`]: synthetic/CSV datasets and the labeled/unlabeled/test split
//! - [`learner`]: the one-hidden-layer target classifier
//! - [`trustset`]: EL2N, SuperLoss weighting, TrustSet extraction
//! - [`transport`]: exact and entropic optimal transport
//! - [`clustering`]: k-means, cluster statistics, action groups
//! - [`rl`]: transitions, replay buffer, reward network, batch selection
//! - [`strategies`]: baseline query strategies
//! - [`al_loop`]: the active-learning driver and its metrics
//! - [`report`]: CSV export/import of run logs and summaries

pub mod al_loop;
pub mod clustering;
pub mod dataset;
pub mod error;
pub mod learner;
pub mod report;
pub mod rl;
pub mod stats;
pub mod strategies;
pub mod transport;
pub mod trustset;

pub use error::{Error, Result};

/// Dense sample identifier; within a [`dataset::Dataset`] the id equals the
/// sample's position.
pub type SampleId = usize;

pub(crate) fn rng_from(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a base seed with two indices (splitmix64 finalizer).
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
