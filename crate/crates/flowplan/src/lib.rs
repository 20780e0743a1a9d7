//! Latent-flow tool planner.
//!
//! Plans multi-step tool workflows by integrating a learned velocity field
//! through a shared embedding space, decoding tools from the resulting
//! trajectory anchors, and executing them closed-loop against an
//! environment. A small numerical lab checks the stability and coverage
//! bounds the design relies on.

pub mod environment;
pub mod error;
pub mod executor;
pub mod metrics;
pub mod numerics;
pub mod cli;
pub mod decoding;
pub mod flow;
pub mod semantic;
pub mod supervision;
pub mod theory;
pub mod training;

pub use error::{FlowError, Result};
