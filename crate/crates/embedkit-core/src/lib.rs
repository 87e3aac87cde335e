//! Desk-scale embedding-model engineering toolkit: the numeric core.
//!
//! Everything in this crate is deterministic and allocator-only (`no_std` +
//! `alloc`): dense f64 tensors, contrastive / distillation / matryoshka
//! losses with hand-derived gradients, a small transformer encoder with an
//! analytic backward pass, tokenizer surgery (pruning, embedding transfer,
//! fertility audits), checkpoint merging, retrieval metrics, and seeded
//! synthetic datasets. Wall clocks, files, and CLI plumbing live in the
//! companion `embedkit` crate.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod bench;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod gradcheck;
pub mod losses;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{DenseTensor, ScoreMatrix};
