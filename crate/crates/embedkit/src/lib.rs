//! Standard-library companion to `embedkit-core`: file formats, run
//! manifests, wall-clock throughput measurement, and the `embedkit` CLI.
//! All numerics stay in the core crate; this layer only moves bytes,
//! reads clocks, and parses flags.

pub mod cli;
pub mod io;
pub mod manifest;
pub mod throughput;

pub use embedkit_core as core;
