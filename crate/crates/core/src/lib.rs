//! Multivariate time-series classification from two views of a sample:
//! a directed causal graph between its dimensions (plug-in transfer
//! entropy, thresholded) and local temporal features from a CBAM-gated,
//! log-sparse windowed self-attention encoder. A graph-isomorphism
//! network propagates the encoder's per-dimension node features over the
//! causal graph and a small MLP head produces class logits.
//!
//! Everything trainable runs on the reverse-mode autodiff engine in
//! [`tensor`].

pub mod causal;
pub mod cli;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gnn;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
