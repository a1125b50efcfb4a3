//! Desk-scale diffusion transfer-learning lab.
//!
//! A small dense denoiser is pretrained on a source Gaussian mixture, then
//! fine-tuned on a shifted target mixture with one of several guidance
//! strategies:
//!
//! - plain fine-tuning (`none`),
//! - classifier-free guidance at sampling time (`cfg`),
//! - domain guidance with the frozen source as marginal estimator (`dog`),
//! - model guidance, a training-time CFG offset (`mg`),
//! - domain-guided fine-tuning, a training-time DoG offset (`dogfit`), and its
//!   variant with guidance strength as a model input (`dogfit_control`).
//!
//! Everything is checked against closed-form mixture scores in [`oracle`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod domains;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod neural;
pub mod oracle;

pub use error::{Error, Result};

/// Spatial dimension of every data point in the lab.
pub const DATA_DIM: usize = 2;

/// A data point.
pub type Point = nalgebra::Vector2<f64>;

/// Class label of a sample; `None` is the null (unconditional) label.
pub type Label = Option<usize>;

/// Deterministic random stream used everywhere.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeded random stream.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Derive an independent sub-seed from a parent seed and a stream tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // splitmix64 over FNV-1a of the tag
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
