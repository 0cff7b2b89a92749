//! Source-free domain adaptation by source distribution estimation.
//!
//! A source-pretrained extractor `F` and frozen linear classifier `G` are
//! adapted to an unlabeled target set. Every epoch the target features are
//! clustered by spherical k-means seeded with the classifier anchors, the
//! confident samples are used to fit per-class Gaussian surrogates of the
//! unseen source features, and `F` is trained to minimize the contrastive
//! domain discrepancy between target features and surrogate draws.
//!
//! The numeric modules ([`numcore`], [`pseudolabel`], [`sde`], [`cdd`]) are
//! generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the element
//! type to `f64`, which is what the model, trainer and CLI use.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cdd;
pub mod error;
pub mod model;
pub mod numcore;
pub mod pseudolabel;
pub mod sde;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
pub use numcore::{DenseMatrix, Scalar, SeededRng};

pub type Matrix = DenseMatrix<f64>;
pub type Matrix32 = DenseMatrix<f32>;
pub type Kernel = cdd::KernelSpec<f64>;
pub type Batch = cdd::CddBatch<f64>;
pub type Clusters = pseudolabel::ClusterState<f64>;
pub type Confident = pseudolabel::ConfidentSet<f64>;
pub type Surrogates = sde::SurrogateSet<f64>;
