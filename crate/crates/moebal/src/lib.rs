//! moebal: a desk-scale laboratory for Mixture-of-Experts load balancing.
//!
//! A tiny trainable MoE language model (shared + routed experts, byte-level
//! vocabulary) is used to compare routing strategies side by side:
//!
//! - vanilla top-K routing,
//! - auxiliary-loss-controlled balancing,
//! - loss-free balancing via dynamically updated expert biases,
//! - Expert Choice, including its chunk-size / shuffle probes and a
//!   constructive demonstration of its future-token information channel.
//!
//! Everything runs on a small self-contained f64 reverse-mode tape so
//! gradients can be audited against finite differences.

pub mod autodiff;
pub mod balancer;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod routing;

pub use error::{Error, Result};
