//! Hierarchical structure-and-motion from keypoint correspondences between
//! unordered, uncalibrated images.

pub mod autocalib;
pub mod bundle;
pub mod clustering;
pub mod engine;
pub mod epipolar_graph;
pub mod geometry;
pub mod io;
pub mod optim;
pub mod robust;
pub mod synthetic;
