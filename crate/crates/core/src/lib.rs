//! Intrinsically interpretable neural networks as boosted mixtures of
//! input-restricted experts, realized inside a single masked
//! block-structured network and trained with generalised EM.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] / [`tape`] / [`param`] / [`adam`]: a minimal dense-tensor
//!   engine with reverse-mode automatic differentiation, a gradient-stop
//!   primitive and the Adam optimizer;
//! - [`scheme`]: feature-group partitions, interpretation subsets, masks
//!   and the subset-inclusion DAG;
//! - [`masked`] / [`attention`]: the overarching network that emulates
//!   restricted experts via masked block matrices (MLP and multi-head
//!   attention variants);
//! - [`mixture`] / [`trainer`]: selection functions, attributions, the
//!   normalized mixture prediction and the GEM training loop;
//! - [`data`] / [`metrics`]: synthetic task generators, implicit-feedback
//!   dataset splitting and evaluation metrics.
//!
//! The crate is `no_std`-compatible (with `alloc`); everything touching
//! files, clocks or a terminal lives in the companion CLI crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adam;
pub mod attention;
pub mod data;
pub mod gradcheck;
pub mod masked;
pub mod metrics;
pub mod mixture;
pub mod ncf;
pub mod param;
pub mod scheme;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use attention::InterpretableAttention;
pub use masked::{Activation, InterpretableMlp, MaskedLayerSpec};
pub use mixture::{GVariant, MixturePrediction, SelectionConfig};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use scheme::{FeaturePartition, InterpretationScheme};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use trainer::{GemConfig, PlateauConfig, TrainHistory};

/// Deterministic RNG used everywhere a seed is taken.
pub type DetRng = rand_chacha::ChaCha8Rng;

/// Builds the crate-wide deterministic RNG from a seed.
pub fn rng_from_seed(seed: u64) -> DetRng {
    use rand::SeedableRng;
    DetRng::seed_from_u64(seed)
}
