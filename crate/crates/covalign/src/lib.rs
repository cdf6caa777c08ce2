//! Covariance alignment for unsupervised domain-adaptive semantic
//! segmentation, self-contained at desk scale.
//!
//! The crate trains a small convolutional segmentation model on a labeled
//! source domain and adapts it to an unlabeled target domain by
//! self-training on pseudo-labels plus correlation-structure alignment of
//! per-category pooled features. Everything runs on a from-scratch `f64`
//! reverse-mode autodiff core so gradients are checkable against finite
//! differences.
//!
//! Module map:
//! - [`tensor`]: tensors, the op tape, backward, gradient checking
//! - [`model`]: the toy encoder/classifier, SGD with a poly schedule,
//!   checkpoints
//! - [`cfp`]: category feature pooling of deep features by soft masks
//! - [`align`]: Pearson matrix, covariance-regularization losses, and the
//!   mean-square / triplet alignment baselines
//! - [`selftrain`]: cross-entropy, pseudo-labels, the stagewise training
//!   loop
//! - [`synthdata`]: the seeded two-domain synthetic benchmark and its
//!   on-disk formats
//! - [`metrics`]: confusion matrices, IoU, PCA projections, CSV exports
//! - [`cli`]: experiment configs and the `gen`/`run`/`eval`/`diag`
//!   commands

pub mod align;
pub mod cfp;
pub mod cli;
pub mod metrics;
pub mod model;
pub mod selftrain;
pub mod synthdata;
pub mod util;
pub mod tensor;
