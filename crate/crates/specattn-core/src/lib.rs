//! Draft-guided sparse attention for speculative decoding, at desk scale.
//!
//! A small draft transformer proposes tokens while a larger verifier checks
//! them. The draft's attention distributions are reused to decide which
//! key-value cache entries the verifier actually needs to read: an offline
//! KL-divergence layer mapping pairs each verifier layer with its closest
//! draft layer, a sorting-free top-p search turns each draft attention row
//! into a token set, and the verifier then runs with per-layer sparse masks.
//! A harness measures perplexity and KV-access reduction for the sparse modes
//! against dense, sliding-window, and fixed-budget baselines.
//!
//! The crate is `no_std`-compatible (`alloc` required); disable default
//! features to drop `std`. File formats, persistence, and the command-line
//! driver live in the companion `specattn-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod decode;
pub mod error;
pub mod harness;
pub mod layer_map;
pub(crate) mod math;
pub mod model;
pub mod select;
pub mod tensor;
pub mod testutil;

pub use attention::AttentionMode;
pub use error::{Error, Result};
pub use tensor::{AttnWeights, MaskVector, Tensor2D};
