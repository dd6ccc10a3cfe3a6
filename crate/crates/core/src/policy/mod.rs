//! The trainable token policy: codec, hashed features, softmax model,
//! group-baseline updates and checkpoints.

pub mod checkpoint;
pub mod codec;
pub mod features;
pub mod grpo;
pub mod model;

pub use checkpoint::{CheckpointError, CheckpointMetadata, CheckpointStore, PolicyCheckpoint, VersionSel};
pub use grpo::{grpo_update, update, Advantage, TouchedToken, UpdateError, UpdateOptions, UpdateStats};
pub use model::{Decoding, PolicyParams};

/// Seeded generator used for every episode and sampling stream.
pub type EpisodeRng = rand_chacha::ChaCha8Rng;

pub fn episode_rng(seed: u64) -> EpisodeRng {
    use rand::SeedableRng;
    EpisodeRng::seed_from_u64(seed)
}
