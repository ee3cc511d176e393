//! Epipolar graph: broad-phase pair proposal, narrow-phase geometric
//! verification and track construction.

mod broad;
mod narrow;
mod tracks;

pub use broad::{
    broad_phase_histogram, connected_components, extract_m_connected_subgraph, MatchHistogram,
    Subgraph,
};
pub use narrow::{
    angular_bin, classify_two_view, match_descriptors, narrow_phase_verify, verify_matches,
    EpipolarEdge, NarrowConfig, Rejection, TwoViewClassification, ANGULAR_BINS,
};
pub use tracks::{build_tracks, tracks_from_matches, Track, TrackSet};

use nalgebra::Vector2;
use thiserror::Error;

/// A detected keypoint with its descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub xy: Vector2<f64>,
    pub scale: f64,
    /// Dominant orientation in radians.
    pub angle: f64,
    pub descriptor: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("match graph is disconnected ({} components)", .components.len())]
    GraphDisconnected { components: Vec<Vec<usize>> },
    #[error("histogram is not symmetric with zero diagonal")]
    InvalidHistogram,
}
