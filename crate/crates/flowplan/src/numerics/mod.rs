//! Numerical substrate: vectors, deterministic RNG, dense nets with manual
//! reverse-mode gradients, Adam, and tensor checkpoints.
//!
//! Everything is f64 and single-threaded; determinism is part of the
//! contract, not an optimization.

pub mod checkpoint;
pub mod net;
pub mod optim;
pub mod rng;
pub mod vec;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry};
pub use net::{finite_diff_check, Activation, DenseNet, GradientTape};
pub use optim::OptimState;
pub use rng::SeededRng;
