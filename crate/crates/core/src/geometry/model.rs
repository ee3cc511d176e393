use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};

use super::{Camera, CameraKind, GeometryError};

pub type ImageId = usize;

/// One keypoint of a track.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: ImageId,
    pub keypoint: usize,
    pub xy: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiePointStatus {
    Pending,
    Triangulated,
    Rejected,
}

/// A track of keypoints across images and the 3D point it images.
#[derive(Debug, Clone, PartialEq)]
pub struct TiePoint {
    pub position: Option<Vector3<f64>>,
    pub track: Vec<Observation>,
    pub status: TiePointStatus,
}

impl TiePoint {
    /// A pending tie-point; the track is sorted by image id.
    pub fn new(mut track: Vec<Observation>) -> Result<Self, GeometryError> {
        track.sort_by_key(|o| o.image);
        if track.len() < 2 {
            return Err(GeometryError::InsufficientPoints {
                needed: 2,
                got: track.len(),
            });
        }
        if track.windows(2).any(|w| w[0].image == w[1].image) {
            return Err(GeometryError::Degenerate(
                "track visits an image twice".into(),
            ));
        }
        Ok(Self {
            position: None,
            track,
            status: TiePointStatus::Pending,
        })
    }

    pub fn observation(&self, image: ImageId) -> Option<&Observation> {
        self.track
            .binary_search_by_key(&image, |o| o.image)
            .ok()
            .map(|i| &self.track[i])
    }

    pub fn is_triangulated(&self) -> bool {
        self.status == TiePointStatus::Triangulated && self.position.is_some()
    }

    pub fn set_position(&mut self, p: Vector3<f64>) {
        self.position = Some(p);
        self.status = TiePointStatus::Triangulated;
    }

    pub fn reject(&mut self) {
        self.position = None;
        self.status = TiePointStatus::Rejected;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Euclidean,
    Projective,
}

/// Cameras and tie-points expressed in one local reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cameras: BTreeMap<ImageId, Camera>,
    /// Keyed by track id.
    pub tie_points: BTreeMap<usize, TiePoint>,
    pub frame: Frame,
}

impl Model {
    pub fn new(frame: Frame) -> Self {
        Self {
            cameras: BTreeMap::new(),
            tie_points: BTreeMap::new(),
            frame,
        }
    }

    pub fn camera_ids(&self) -> Vec<ImageId> {
        self.cameras.keys().copied().collect()
    }

    /// Observations of a tie-point made by cameras of this model.
    pub fn observations_in_model<'a>(
        &'a self,
        tp: &'a TiePoint,
    ) -> impl Iterator<Item = &'a Observation> + 'a {
        tp.track
            .iter()
            .filter(|o| self.cameras.contains_key(&o.image))
    }

    pub fn triangulated(&self) -> impl Iterator<Item = (usize, &TiePoint)> {
        self.tie_points
            .iter()
            .filter(|(_, tp)| tp.is_triangulated())
            .map(|(&id, tp)| (id, tp))
    }

    pub fn triangulated_count(&self) -> usize {
        self.triangulated().count()
    }

    /// Reprojection errors (pixels) of one tie-point in every observing camera.
    pub fn reprojection_errors(&self, tp: &TiePoint) -> Vec<(ImageId, f64)> {
        let Some(x) = tp.position else {
            return Vec::new();
        };
        self.observations_in_model(tp)
            .map(|o| {
                let e = self.cameras[&o.image]
                    .project(&x)
                    .map(|p| (p - o.xy).norm())
                    .unwrap_or(f64::INFINITY);
                (o.image, e)
            })
            .collect()
    }

    /// Mean and RMS reprojection error over all triangulated observations.
    pub fn reprojection_stats(&self) -> (f64, f64, usize) {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0usize;
        for (_, tp) in self.triangulated() {
            for (_, e) in self.reprojection_errors(tp) {
                sum += e;
                sq += e * e;
                n += 1;
            }
        }
        if n == 0 {
            return (0.0, 0.0, 0);
        }
        (sum / n as f64, (sq / n as f64).sqrt(), n)
    }

    /// Checks the structural invariants of a model.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.frame == Frame::Euclidean
            && self
                .cameras
                .values()
                .any(|c| c.kind() != CameraKind::Euclidean)
        {
            return Err("Euclidean model holds a projective camera".into());
        }
        for (id, tp) in self.triangulated() {
            let seen = self.observations_in_model(tp).count();
            if seen < 2 {
                return Err(format!(
                    "tie-point {id} is observed by {seen} model cameras"
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(image: ImageId) -> Observation {
        Observation {
            image,
            keypoint: 0,
            xy: Vector2::zeros(),
        }
    }

    #[test]
    fn tie_point_rejects_repeated_image() {
        assert!(TiePoint::new(vec![obs(1), obs(1)]).is_err());
        assert!(TiePoint::new(vec![obs(1)]).is_err());
        let tp = TiePoint::new(vec![obs(3), obs(1)]).unwrap();
        assert_eq!(tp.track[0].image, 1);
        assert!(tp.observation(3).is_some());
        assert!(tp.observation(2).is_none());
    }
}
