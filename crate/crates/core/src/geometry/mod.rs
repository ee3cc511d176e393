//! Projective-geometry kernels: cameras, projection, two-view solvers,
//! triangulation, resection, absolute/projective alignment and cheirality.
//!
//! Every function here is a pure function of its inputs.

mod alignment;
mod camera;
mod cheirality;
pub mod linalg;
mod model;
mod resection;
mod triangulation;
mod two_view;

pub use alignment::{absolute_orientation_similarity, projectivity_dlt_3d, Similarity};
pub use camera::{projective_center, Camera, CameraKind, EuclideanCamera, Intrinsics};
pub use cheirality::{cheirality_counts, cheirality_enforce, CheiralityReport};
pub use model::{Frame, ImageId, Model, Observation, TiePoint, TiePointStatus};
pub use resection::{
    ppnp, refine_pose, refine_projective_camera, resect_calibrated, resect_projective_dlt,
};
pub use triangulation::{triangulate, Triangulation, TRIANGULATION_MAX_ITERATIONS};
pub use two_view::{
    essential_from_fundamental, fundamental_sampson, homography_sampson, project_to_essential,
    relative_orientation, solve_fundamental, solve_fundamental_7pt, solve_homography,
    symmetric_transfer_error, RelativePose,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point lies on the principal plane (projective depth below 1e-12)")]
    PointAtInfinity,
    #[error("linear system is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("matrix is not an essential matrix (singular values {0:?})")]
    NotEssential([f64; 3]),
    #[error("no factorization candidate places a majority of points in front of both cameras")]
    NoCheiralSolution,
    #[error("iterative pose solver did not converge")]
    Divergence,
    #[error("invalid intrinsics")]
    InvalidIntrinsics,
}
