//! Memory-efficient sketching of neural-network layer activations.
//!
//! This crate maintains three complementary random-projection sketches of
//! each layer's batch activations through exponential moving averages, and
//! reconstructs approximate activations from them on demand during the
//! backward pass. That replaces the usual "store every activation matrix"
//! bookkeeping with a handful of skinny matrices per layer, which is the
//! whole point: weight gradients and training diagnostics from compressed
//! state.
//!
//! The crate is organized in layers:
//!
//! - [`control`] — the underlying three-sketch framework for a single
//!   static or streamed matrix, with its two-stage least-squares
//!   reconstruction and tail-energy utilities.
//! - [`ema`] — per-layer EMA sketch state and update rules for batch
//!   activations, plus the brute-force exponentially-weighted oracle used
//!   to validate them.
//! - [`reconstruct`] — feature-structure reconstruction and batch
//!   projection from EMA sketches, with a fused memory-lean path.
//! - [`mlp`] — a self-contained feedforward network with exact and
//!   sketched backpropagation, losses, and Adam.
//! - [`rank`] — the patience-based adaptive rank controller.
//! - [`monitor`] — sketch-derived diagnostics (gradient-norm proxy,
//!   stable rank) and closed-form memory accounting.
//! - [`data`] — IDX dataset parsing and synthetic dataset generators.
//! - [`experiment`] — experiment configuration, the training runner, the
//!   monitoring demo, and checkpointing.
//!
//! A narrative guide with runnable examples lives in `book/`; the same
//! snippets are compiled and executed as doc-tests by the `actsketch-guide`
//! crate.

pub mod control;
pub mod data;
pub mod ema;
pub mod error;
pub mod experiment;
pub mod mlp;
pub mod monitor;
pub mod rank;
pub mod reconstruct;

pub use error::{Error, Result};
