//! Change detection for co-registered SAR image pairs.
//!
//! The pipeline segments the scene into superpixels, votes a coarse
//! changed/unchanged partition from fuzzy-clustered difference vectors with a
//! cascaded-PCA classifier for the ambiguous middle, then refines the
//! surviving foreground through a low-rank plus sparse decomposition and a
//! second vote. Synthetic scene generation and evaluation metrics live here
//! as well; the `sarcd` binary wires it all to the command line.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`). The aliases
//! below fix the scalar type used by the command-line front end.

pub mod clustering;
pub mod error;
pub mod imaging;
pub mod linalg;
pub mod lrsd;
pub mod metrics;
pub mod num;
pub mod pcanet;
pub mod pipeline;
pub mod rng;
pub mod superpixel;
pub mod svm;
pub mod synthgen;

pub use error::{Error, Result};
pub use num::Real;

/// Scalar type used by the command-line tools.
pub type Scalar = f64;
pub type Image = imaging::SarImage<Scalar>;
pub type Image32 = imaging::SarImage<f32>;
