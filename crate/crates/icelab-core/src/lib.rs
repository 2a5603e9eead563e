//! Desk-scale laboratory for editing the knowledge of small autoregressive
//! language models.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] / [`graph`] — dense 64-bit tensors and a Wengert-tape
//!   reverse-mode autodiff engine with exactly the operations the model
//!   zoo needs (matmul, gathers, fused log-softmax / layer-norm, …).
//! * [`params`] — named parameter sets with snapshots, gradient clipping,
//!   ball projection, and a central finite-difference oracle.
//! * [`model`] — three toy architectures (bigram table, windowed MLP,
//!   one-block transformer) behind a single forward interface, plus
//!   sampling, greedy decoding, and gradient-descent pretraining.
//! * [`editing`] — the editing losses: plain fine-tuning on a one-hot
//!   target, its self-sampling rewrite, the in-context consistency term,
//!   the combined objective, exact enumeration oracles for all of them,
//!   and the iterative edit loop with a moving detached target.
//! * [`metrics`] — edit success / portability / locality rates, n-gram
//!   fluency, and perplexity ratios against a frozen reference model.
//! * [`corpus`] — word-level vocabulary, tokenizer, edit-record types,
//!   and a deterministic synthetic fact world generator.
//!
//! Everything is `no_std` + `alloc`: file formats, CLI, and reports live
//! in the companion `icelab` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod corpus;
pub mod editing;
pub mod graph;
pub mod math;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
