//! Product-quantized kNN token datastores.
//!
//! Building blocks for storing decoder contexts as compact codes, searching
//! them with an inverted-file index, and interpolating the retrieved token
//! distribution into a sequence model at decode time.

pub mod datastore;
pub mod error;
pub mod generate;
pub mod io;
pub mod ivf;
pub mod kmeans;
pub mod linalg;
pub mod pq;
pub mod rng;
pub mod scalar;
pub mod subset;
pub mod transform;
pub mod vector;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete single-precision aliases. The file formats and the datastore
/// pipeline are pinned to `f32`; the generic kernels above can also be
/// instantiated at `f64` (tests use that for oracles).
pub type Matrix = vector::VectorMatrix<f32>;
pub type Codebook = pq::PqCodebook<f32>;
pub type Lut = pq::DistanceLut<f32>;
pub type Pca = transform::PcaTransform<f32>;
pub type Opq = transform::OpqTransform<f32>;
