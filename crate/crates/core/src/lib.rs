//! Cross-embodiment action chunking with rectified flow.
//!
//! * [`unified_space`]: slot-structured unified action space and per-embodiment projections.
//! * [`flow_policy`]: Euler sampling, flow-matching loss, a trainable MLP field.
//! * [`experts`]: routed mixture of flow experts and slot-wise adapters.
//! * [`mpg`]: discrepancy-gated context enhancement and two-stage refinement.
//! * [`uac`]: delay-aware training and the commit / lock / stitch protocol.
//! * [`runtime`]: ring buffer and the producer / consumer execution loop.
//! * [`sim`]: simulated embodiments, latency models, tasks and metrics.
//! * [`seqmodel`]: query-answer serialization, attention gating and loss routing.
//! * [`harness`]: experiment configs, the CLI driver and the acceptance checks.

pub mod error;
pub mod experts;
pub mod flow_policy;
pub mod harness;
pub mod mpg;
pub mod nn;
pub mod params;
pub mod rng;
pub mod runtime;
pub mod seqmodel;
pub mod sim;
pub mod uac;
pub mod unified_space;

pub use error::{Error, Result};
