//! Data-free model extraction of soft-label classifiers.
//!
//! A generator synthesises queries, the black-box target labels them and a
//! clone is distilled from the answers. The generator is trained to maximise
//! target/clone disagreement using forward-difference gradient estimates at
//! its pre-`tanh` activations, since the target offers no gradients.
//!
//! Module map:
//! - [`tensor`], [`graph`], [`nn`], [`loss`], [`optim`], [`checkpoint`]: the
//!   numeric substrate (dense tensors, reverse-mode autodiff, MLP layers).
//! - [`oracle`]: the query-only target with exact budget accounting.
//! - [`zo`]: zeroth-order gradient estimation and gradient injection.
//! - [`attack`]: the data-free attack loop and its white-box ablation.
//! - [`pd`]: the partial-data variant with a gradient-penalised critic.
//! - [`baselines`]: JBDA, noise and surrogate-data attacks.
//! - [`data`], [`metrics`], [`sweep`], [`config`]: datasets, evaluation and
//!   experiment orchestration.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod par;
pub mod pd;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod zo;

pub use error::{Error, Result};
pub use tensor::Tensor;
