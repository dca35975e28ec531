//! Consistency-regularised logit distillation at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: `f32` tensors and a reverse-mode autodiff tape with the
//!   softmax, cross-entropy and temperature-KLD primitives.
//! - [`augment`]: seeded weak and strong view transformations.
//! - [`nn`]: small CNN/MLP teachers and students, SGD with momentum, the step
//!   learning-rate schedule and the checkpoint format.
//! - [`data`]: CIFAR binary records, synthetic datasets, normalisation and
//!   shuffled batching.
//! - [`distill`]: soft-label selection, within-view and cross-view losses,
//!   the training step and the training loop.
//! - [`harness`]: run configuration, metrics, manifests and the experiment
//!   commands behind the `crld` binary.
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example` lists them.

pub mod augment;
pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{CrldError, Result};
pub use tensor::{Tape, Tensor, Var};
