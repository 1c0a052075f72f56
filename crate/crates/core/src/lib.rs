//! Self-speculative decoding over a layer-skippable language model, with
//! per-domain skip masks found by Bayesian search over mask space and chosen
//! at run time by nearest-neighbor routing on last-hidden-state anchors.
//!
//! The crate is organized around the lifecycle of a deployment:
//!
//! 1. [`model`] — a deterministic layered LM whose attention/MLP sublayers
//!    can be individually skipped, plus synthetic domain corpora.
//! 2. [`search`] — Bayesian optimization over skip masks against a decode
//!    objective, with a random-search baseline.
//! 3. [`router`] — k-means clustering of prompt hidden states, anchor
//!    selection, and 1-NN domain classification backed by a mask registry.
//! 4. [`engine`] — the draft/verify speculative decoding loop whose output
//!    is bit-identical to full-model greedy decoding.
//! 5. [`stream`] — Markov mixed-domain request streams.
//! 6. [`metrics`] — acceptance statistics, cost coefficients, and expected
//!    speedup reporting.

pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod router;
pub mod search;
pub mod stream;

pub use error::{Error, Result};
