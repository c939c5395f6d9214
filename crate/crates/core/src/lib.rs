//! Linear attention mechanisms with constant-time lookups.
//!
//! A document encoded into hidden states `H` (`n x k`) can be queried with
//! softmax attention, `R = Hᵀ softmax(H q)`, which costs `O(nk)` per lookup
//! and keeps all of `H`; or with linear attention, `R = C q` where
//! `C = HᵀH` is a fixed `k x k` sketch built once per document, so every
//! lookup costs `O(k²)` regardless of `n`. Gated variants filter what each
//! state adds to the sketch and backpropagate by undoing updates in reverse.
//!
//! Beyond the kernels the crate has GRU encoders with manual gradients, a
//! cloze-style QA training pipeline comparing the mechanisms, an on-disk
//! sketch store, and a benchmark harness for lookup/encoding cost.

pub mod attention;
pub mod bench;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod qa;
pub mod rnn;
pub mod selftest;
pub mod store;

pub use attention::{
    build_sketch_batch, build_sketch_stream, gated_linear_backward, gated_linear_forward,
    gated_update, linear_attention, linear_attention_backward, reverse_update, softmax_attention,
    softmax_attention_backward, AttentionGrads, GateParams, HiddenStates, Sketch, StepTape,
};
pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
