//! Geometric and analytic pipeline for measuring rice panicles from
//! multi-view reconstructions.
//!
//! The stages, in the order a sample flows through them:
//!
//! 1. [`view_filter`]: estimate where the cameras aim and drop off-target views.
//! 2. [`segmentation`]: merge generic fine masks with rough instance masks,
//!    and score masks against ground truth.
//! 3. [`field_export`]: marching cubes over a density grid, then area-weighted
//!    surface sampling into a point cloud.
//! 4. [`cloud_ops`]: DBSCAN, label/panicle classification, oriented boxes and
//!    size calibration against the 7.5 cm label.
//! 5. [`traits`]: Laplacian contraction skeleton, main-path selection with a
//!    multi-scale turning-angle gate, spline length and voxel volume.
//! 6. [`eval`]: regression metrics, correlation matrix and plots.
//!
//! [`synth`] builds labelled synthetic scenes with known answers for testing.

// `!(x > 0.0)` is used on purpose so NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud_ops;
pub mod error;
pub mod eval;
pub mod field_export;
pub mod geom;
pub mod grid;
pub mod kdtree;
pub mod mask;
mod mc_tables;
pub mod pca;
pub mod ply;
pub mod segmentation;
pub mod synth;
pub mod traits;
pub mod view_filter;

pub use error::{Error, Result};
pub use geom::{Aabb, CameraPose, OrientedBoundingBox, PointCloud, Vec3};
pub use grid::DensityGrid;
pub use kdtree::{knn, KdTree};
pub use mask::BinaryMask;
pub use pca::{estimate_normals, pca_eigen, Pca};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
