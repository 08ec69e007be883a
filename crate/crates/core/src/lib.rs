//! Partial multi-label learning with graph disambiguation.
//!
//! Each training example carries a *candidate* label set that contains every
//! true label plus some false positives. The learner keeps a matrix of soft
//! pseudo-labels `Z` and alternates two steps per epoch:
//!
//! 1. fit a small fully-connected network to the current pseudo-labels with
//!    mini-batch SGD, then
//! 2. smooth the pseudo-labels by a few gradient steps on a quadratic
//!    objective that ties them to the network output, to the candidate sets,
//!    and to two graphs: a sparse kNN instance graph and a label
//!    co-occurrence graph.
//!
//! Module map:
//!
//! * [`dataset`]: text format, synthetic candidate corruption, folds.
//! * [`graph`]: kNN instance graph, label graph, normalized Laplacians.
//! * [`propagation`]: the pseudo-label objective, its gradient and the
//!   descent loop.
//! * [`network`]: the three-layer classifier, risk functions, SGD.
//! * [`trainer`]: the alternating loop and its ablation variants.
//! * [`metrics`]: ranking loss, average precision, hamming loss.
//! * [`experiment`]: configuration, cross-validation, ablation, timing and
//!   grid search drivers used by the `plain` binary.
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod network;
pub mod propagation;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/propagation.md")]
    mod propagation {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
