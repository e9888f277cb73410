//! Desk-scale generative search engine.
//!
//! The crate trains a query encoder, an item encoder with `k` latent slots,
//! a multi-level vector-quantization codebook, and an autoregressive decoder
//! over semantic-ID paths — all jointly in one pre-training loop — then
//! post-trains the generator with group-relative preference optimization
//! against a simulated reward system, and serves trie-constrained beam-search
//! retrieval over a dynamic prefix tree of valid paths.
//!
//! Everything runs on a synthetic search-log simulator so the full lifecycle
//! (data generation, pre-training, post-training, evaluation, serving) fits
//! on a laptop CPU. See the `examples/` directory for one runnable program
//! per capability, and the `sidsearch` binary for the end-to-end CLI.
//!
//! Gradients are hand-derived per loss and validated against a central
//! finite-difference harness (`num::grad_check`); there is no autodiff.

pub mod checkpoint;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod decode;
pub mod eval;
pub mod model;
pub mod num;
pub mod pretrain;
pub mod seeding;
pub mod service;
pub mod sim;
pub mod spo;
pub mod trie;

mod error;

pub use error::{Error, Result};
