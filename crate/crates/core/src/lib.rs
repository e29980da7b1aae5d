//! newslab-core: a self-contained laboratory for neural news recommendation.
//!
//! The crate provides everything needed to train, evaluate, and compare
//! small two-tower news recommenders on a single machine:
//!
//! * [`tensor`] — a minimal reverse-mode autodiff engine (dense tensors, a
//!   gradient tape, Adam, and reusable attention / recurrence building blocks).
//! * [`news`] — news encoders: text encoders over title tokens, a category
//!   encoder, and feature aggregation into one news embedding.
//! * [`user`] — user encoders that turn a click history into a user embedding.
//! * [`pipeline`] — negative-sampled training, ranking, evaluation, and
//!   checkpointing for the assembled recommender.
//! * [`metrics`] — ranking quality (nDCG@k), ranked-list overlap (Jaccard@k),
//!   representational similarity (linear CKA), comparison matrices, and
//!   average-linkage hierarchical clustering.
//! * [`data`] — dataset parsing and serialization (news/behaviors TSV, word
//!   vectors, frozen embedding stores) plus a synthetic dataset generator.
//! * [`cli`] — the `newslab` command-line front end.
//!
//! Determinism is a design goal throughout: every source of randomness is an
//! explicitly seeded [`rand_chacha::ChaCha8Rng`], iteration orders are fixed,
//! and repeated runs with the same seed produce bit-identical artifacts.

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod news;
pub mod pipeline;
pub mod tensor;
pub mod user;

pub use error::{Error, Result};

/// The RNG used for every stochastic choice in the crate.
///
/// ChaCha8 is seedable, portable, and produces identical streams on every
/// platform, which keeps runs reproducible bit-for-bit.
pub type DetRng = rand_chacha::ChaCha8Rng;

/// Derive an independent named RNG stream from a base seed.
///
/// Different subsystems (parameter init, negative sampling, epoch shuffling,
/// …) each get their own stream so that changing how one subsystem consumes
/// randomness does not perturb the others.
pub fn seed_stream(seed: u64, tag: u64) -> u64 {
    // SplitMix64-style mixing; good avalanche behaviour for small tags.
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags used with [`seed_stream`].
pub mod seeds {
    /// Model parameter initialization.
    pub const INIT: u64 = 1;
    /// Negative sampling when building training samples.
    pub const SAMPLING: u64 = 2;
    /// Epoch-level shuffling of training samples.
    pub const SHUFFLE: u64 = 3;
    /// Random vectors for words missing from a pretrained table.
    pub const OOV: u64 = 4;
    /// Synthetic dataset generation.
    pub const SYNTH: u64 = 5;
    /// Row subsampling for embedding-matrix comparisons.
    pub const SUBSAMPLE: u64 = 6;
}
