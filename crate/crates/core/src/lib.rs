//! Unsupervised hyperspectral image segmentation.
//!
//! The model is a convexly relaxed multiphase Mumford-Shah functional whose
//! per-segment data term is a robust anisotropic distance: the square root of
//! an ε-regularized Mahalanobis distance plus a log-determinant volume term.
//! The pipeline is
//!
//! 1. intensity normalization and an MNF (minimum noise fraction) transform
//!    ([`preprocess`]),
//! 2. a seeded k-means initialization ([`kmeans`]),
//! 3. alternating minimization ([`pipeline`]): a fixed-point scheme for the
//!    segment means and covariances ([`fitting`], [`indicator`]) and a
//!    primal-dual hybrid gradient solver for the labeling ([`pdhg`]),
//!    followed by hard thresholding.
//!
//! [`eval`] scores a segmentation against ground truth after Hungarian label
//! matching, [`synth`] generates labeled synthetic scenes and [`io`] holds the
//! on-disk formats.

pub mod cube;
pub mod error;
pub mod eval;
pub mod fitting;
pub mod indicator;
pub mod io;
pub mod kmeans;
pub mod linalg;
pub mod pdhg;
pub mod pipeline;
pub mod preprocess;
pub mod synth;

pub use cube::{HyperCube, LabelField, Rng};
pub use error::{Error, Result};
