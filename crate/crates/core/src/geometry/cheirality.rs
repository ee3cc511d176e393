use nalgebra::Matrix3x4;

use super::{Camera, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheiralityReport {
    /// Observations in front of / behind their camera before the call.
    pub front: usize,
    pub behind: usize,
    pub reflected: bool,
    /// Exactly half of the observations were behind; no reflection applied.
    pub tie: bool,
}

/// Counts point/camera pairs by the sign of the depth.
pub fn cheirality_counts(model: &Model) -> (usize, usize) {
    let mut front = 0;
    let mut behind = 0;
    for (_, tp) in model.triangulated() {
        let x = tp.position.expect("triangulated");
        for o in model.observations_in_model(tp) {
            if model.cameras[&o.image].depth(&x) > 0.0 {
                front += 1;
            } else {
                behind += 1;
            }
        }
    }
    (front, behind)
}

/// Applies the global reflection `X -> -X` when strictly more observations
/// lie behind their cameras than in front.
pub fn cheirality_enforce(model: &mut Model) -> CheiralityReport {
    let (front, behind) = cheirality_counts(model);
    let tie = front == behind && front > 0;
    let reflected = behind > front;
    if reflected {
        for tp in model.tie_points.values_mut() {
            if let Some(p) = tp.position.as_mut() {
                *p = -*p;
            }
        }
        for cam in model.cameras.values_mut() {
            match cam {
                Camera::Euclidean(c) => c.center = -c.center,
                Camera::Projective(p) => {
                    let mut q: Matrix3x4<f64> = *p;
                    for r in 0..3 {
                        q[(r, 3)] = -q[(r, 3)];
                    }
                    *p = q;
                }
            }
        }
    }
    CheiralityReport {
        front,
        behind,
        reflected,
        tie,
    }
}
