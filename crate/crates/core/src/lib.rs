//! Knowledge distillation for small convolutional classifiers, with
//! integrated-gradients overlays used as training-time augmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! - [`models`]: the teacher/student CNN ladder and checkpoints.
//! - [`loss`]: temperature softmax, cross-entropy, KL and the blended KD loss.
//! - [`ig`]: integrated-gradients attribution and dataset precompute.
//! - [`augment`]: attribution scaling, normalisation and stochastic overlay.
//! - [`data`]: CIFAR-10 records, attribution caches, metrics records, PPM panels.
//! - [`harness`]: Adam, training modes, ablation, grid search, latency.
//! - [`cli`]: the `gradistill` command-line front end.

pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod harness;
pub mod ig;
pub mod loss;
pub mod models;
pub mod tensor;
