//! Language-based assessment of trustfulness.
//!
//! The pipeline runs from raw messages and questionnaire responses
//! ([`corpus`]) through tokenization ([`tokenizer`]) and sparse user-level
//! features ([`features`]), per-family feature reduction ([`reduce`]) and
//! word-count-weighted ridge regression ([`model`]), to evaluation
//! ([`eval`]) and differential language analysis ([`dla`]). [`synth`]
//! generates seeded corpora with a planted trait for end-to-end checks.

pub mod corpus;
pub mod dla;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod reduce;
pub mod stats;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};

/// Derive an independent, reproducible seed for sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(stream.wrapping_add(0x5851_f42d_4c95_7f2d)))
}
