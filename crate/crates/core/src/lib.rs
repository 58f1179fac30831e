//! Description-free multi-prompt learning at desk scale.
//!
//! The crate holds the numerics: learnable multi-prompt banks shared across
//! classes, per-(class, prompt) weights with an L1 penalty, a cyclic mapping
//! `psi(phi(t))` between the vision-language text space and an LLM embedding
//! space, the distillation and classification objectives with exact
//! hand-derived gradients, and the training loop that ties them together.
//! Frozen encoders are small deterministic networks built from a seed.
//!
//! Everything here is `no_std` + `alloc`. File formats, the remote embedding
//! client and the command line live in the `demul` crate.
//!
//! Randomness flows from a single `u64` seed. Sub-streams are derived with
//! [`num::derive_seed`]: `splitmix64(seed ^ fnv1a64(label))`.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod mapping;
pub mod nn;
pub mod num;
pub mod objective;
pub mod prompts;
pub mod trainer;

pub use error::{Error, Result};
pub use num::{GradBundle, RealMat, RealVec, SeededRng};
