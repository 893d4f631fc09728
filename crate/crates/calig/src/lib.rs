//! Attribution engine for transformer encoder classifiers.
//!
//! Implements CA-LIG (context-aware layer-wise integrated gradients): per-layer
//! integrated gradients fused with class-specific attention gradients, rolled
//! out across blocks into a signed token-to-token influence map. Ships with a
//! small trainable encoder, the standard comparison explainers (integrated
//! gradients, input-times-gradient, attention rollout, attention last), and a
//! faithfulness harness (token-F1 against gold rationales, insertion/deletion
//! perturbation AUC) driven by a synthetic planted-keyword benchmark.

pub mod attribution;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod render;
pub mod tensor;

pub use error::{CaligError, Result};
