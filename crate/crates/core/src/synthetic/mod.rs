//! Ground-truth scene generator and brute-force oracles used by the tests
//! and the `synth`/`eval` commands.

mod flow;

pub use flow::{all_pairs_min_cut, max_flow_unit};

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::bundle::{adjust, BaOptions, BaProblem, Parameterization};
use crate::engine::ImageInfo;
use crate::epipolar_graph::{
    verify_matches, EpipolarEdge, Keypoint, NarrowConfig, Track, TrackSet,
};
use crate::geometry::linalg::rotation_angle_between;
use crate::geometry::{
    absolute_orientation_similarity, Camera, EuclideanCamera, Frame, ImageId, Intrinsics, Model,
    Observation, Similarity, TiePoint,
};

pub const DESCRIPTOR_DIM: usize = 32;
const VISIBILITY_ANGLE_DEG: f64 = 75.0;
const DESCRIPTOR_NOISE: f32 = 0.02;
/// Points are resampled until this many cameras see them.
const MIN_VIEWS: usize = 3;
const MAX_RESAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Cameras on a circle around a shell of points.
    Ring,
    /// Cameras on a planar grid looking down on a slab of points.
    Grid,
    /// Two arcs of cameras around a shell of points.
    TwoCluster,
    /// All points on one plane.
    Planar,
    /// Baseline over depth below 1e-3.
    LowParallax,
}

impl SceneKind {
    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Ring => "ring",
            SceneKind::Grid => "grid",
            SceneKind::TwoCluster => "two-cluster",
            SceneKind::Planar => "planar",
            SceneKind::LowParallax => "low-parallax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            SceneKind::Ring,
            SceneKind::Grid,
            SceneKind::TwoCluster,
            SceneKind::Planar,
            SceneKind::LowParallax,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub n_cameras: usize,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub outlier_rate: f64,
    pub seed: u64,
    pub image_size: (f64, f64),
    pub focal: f64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, n_cameras: usize, n_points: usize, seed: u64) -> Self {
        Self {
            kind,
            n_cameras,
            n_points,
            noise_sigma: 0.0,
            outlier_rate: 0.0,
            seed,
            image_size: (3000.0, 2000.0),
            focal: 3000.0,
        }
    }

    pub fn with_noise(mut self, sigma: f64, outlier_rate: f64) -> Self {
        self.noise_sigma = sigma;
        self.outlier_rate = outlier_rate;
        self
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub cameras: Vec<EuclideanCamera>,
    pub points: Vec<Vector3<f64>>,
    pub keypoints: Vec<Vec<Keypoint>>,
    /// Point index of every keypoint, per image.
    pub keypoint_point: Vec<Vec<usize>>,
    /// Whether a keypoint's position was replaced by a uniform outlier.
    pub outlier: Vec<Vec<bool>>,
}

fn look_at(c: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Matrix3<f64> {
    let z = (target - c).normalize();
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..TAU);
    let s = (1.0 - z * z).sqrt();
    Vector3::new(s * phi.cos(), z, s * phi.sin())
}

fn ring_camera(theta: f64, i: usize) -> (Vector3<f64>, Matrix3<f64>) {
    let c = Vector3::new(
        5.0 * theta.sin(),
        0.4 * (2.7 * i as f64).sin(),
        -5.0 * theta.cos(),
    );
    (
        c,
        look_at(c, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)),
    )
}

/// Camera centres and world-to-camera rotations.
fn camera_layout(spec: &SceneSpec) -> Vec<(Vector3<f64>, Matrix3<f64>)> {
    let n = spec.n_cameras;
    match spec.kind {
        SceneKind::Ring => (0..n)
            .map(|i| ring_camera(TAU * i as f64 / n as f64, i))
            .collect(),
        SceneKind::TwoCluster => {
            let half = n.div_ceil(2);
            let span = half.max(2) as f64 - 1.0;
            (0..n)
                .map(|i| {
                    let (centre, k) = if i < half { (-1.3, i) } else { (1.3, i - half) };
                    ring_camera(centre + 1.0 * (k as f64 / span - 0.5), i)
                })
                .collect()
        }
        SceneKind::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            let rows = n.div_ceil(cols);
            (0..n)
                .map(|i| {
                    let (r, c) = ((i / cols) as f64, (i % cols) as f64);
                    let x = 0.8 * (c - (cols as f64 - 1.0) / 2.0);
                    let z = 0.8 * (r - (rows as f64 - 1.0) / 2.0);
                    let centre = Vector3::new(x, 5.0, z);
                    let target = Vector3::new(0.6 * x, 0.0, 0.6 * z);
                    (centre, look_at(centre, target, Vector3::z()))
                })
                .collect()
        }
        SceneKind::Planar => (0..n)
            .map(|i| {
                let t = TAU * i as f64 / n as f64;
                let c = Vector3::new(1.5 * t.sin(), 5.0, -1.5 * t.cos());
                (c, look_at(c, Vector3::zeros(), Vector3::z()))
            })
            .collect(),
        SceneKind::LowParallax => (0..n)
            .map(|i| {
                let c = Vector3::new(0.0008 * i as f64, 0.0, -5.0);
                let target = Vector3::new(0.02 * i as f64, 0.0, 0.0);
                (c, look_at(c, target, Vector3::new(0.0, -1.0, 0.0)))
            })
            .collect(),
    }
}

/// A point and its surface normal.
fn sample_point(kind: SceneKind, rng: &mut ChaCha8Rng) -> (Vector3<f64>, Vector3<f64>) {
    match kind {
        SceneKind::Ring | SceneKind::TwoCluster => {
            let d = random_unit(rng);
            (d * rng.random_range(0.7..1.3), d)
        }
        SceneKind::LowParallax => {
            let d = random_unit(rng);
            (d * rng.random_range(0.7..1.3), Vector3::new(0.0, 0.0, -1.0))
        }
        SceneKind::Grid => {
            let p = Vector3::new(
                rng.random_range(-1.6..1.6),
                rng.random_range(-0.5..0.5),
                rng.random_range(-1.2..1.2),
            );
            (p, Vector3::y())
        }
        SceneKind::Planar => {
            let r = 1.5 * rng.random::<f64>().sqrt();
            let a: f64 = rng.random_range(0.0..TAU);
            (Vector3::new(r * a.cos(), 0.0, r * a.sin()), Vector3::y())
        }
    }
}

fn visible(
    cam: &EuclideanCamera,
    x: &Vector3<f64>,
    normal: &Vector3<f64>,
    size: (f64, f64),
) -> Option<Vector2<f64>> {
    if cam.to_camera(x).z <= 0.0 {
        return None;
    }
    if normal.dot(&(cam.center - x).normalize()) < VISIBILITY_ANGLE_DEG.to_radians().cos() {
        return None;
    }
    let p = Camera::Euclidean(cam.clone()).project(x).ok()?;
    (p.x >= 0.0 && p.y >= 0.0 && p.x < size.0 && p.y < size.1).then_some(p)
}

/// Deterministic scene generation.
pub fn generate(spec: &SceneSpec) -> SyntheticScene {
    assert!(spec.n_cameras >= 2, "need at least two cameras");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = spec.image_size;
    let k = Intrinsics::simple(spec.focal, w / 2.0, h / 2.0);
    let cameras: Vec<EuclideanCamera> = camera_layout(spec)
        .into_iter()
        .map(|(c, r)| EuclideanCamera::new(k, r, c))
        .collect();
    let min_views = spec.n_cameras.min(MIN_VIEWS);
    let pts: Vec<(Vector3<f64>, Vector3<f64>)> = (0..spec.n_points)
        .map(|_| {
            let mut candidate = sample_point(spec.kind, &mut rng);
            for _ in 0..MAX_RESAMPLES {
                let views = cameras
                    .iter()
                    .filter(|c| visible(c, &candidate.0, &candidate.1, spec.image_size).is_some())
                    .count();
                if views >= min_views {
                    break;
                }
                candidate = sample_point(spec.kind, &mut rng);
            }
            candidate
        })
        .collect();
    let descriptors: Vec<Vec<f32>> = (0..pts.len())
        .map(|_| {
            (0..DESCRIPTOR_DIM)
                .map(|_| rng.random::<f32>() * 2.0 - 1.0)
                .collect()
        })
        .collect();
    let angles: Vec<f64> = (0..pts.len())
        .map(|_| (rng.random_range(0..8) as f64 + 0.5) * PI / 4.0)
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).unwrap();
    let dnoise = Normal::new(0.0f32, DESCRIPTOR_NOISE).unwrap();
    let mut keypoints = Vec::new();
    let mut keypoint_point = Vec::new();
    let mut outlier = Vec::new();
    for cam in &cameras {
        let mut kps = Vec::new();
        let mut ids = Vec::new();
        let mut out = Vec::new();
        for (pi, (x, normal)) in pts.iter().enumerate() {
            let Some(p) = visible(cam, x, normal, spec.image_size) else {
                continue;
            };
            let mut xy = p;
            let is_outlier = spec.outlier_rate > 0.0 && rng.random::<f64>() < spec.outlier_rate;
            if is_outlier {
                xy = Vector2::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
            } else if spec.noise_sigma > 0.0 {
                xy += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let descriptor = descriptors[pi]
                .iter()
                .map(|d| d + dnoise.sample(&mut rng))
                .collect();
            kps.push(Keypoint {
                xy,
                scale: 1.0,
                angle: angles[pi],
                descriptor,
            });
            ids.push(pi);
            out.push(is_outlier);
        }
        keypoints.push(kps);
        keypoint_point.push(ids);
        outlier.push(out);
    }
    SyntheticScene {
        spec: *spec,
        cameras,
        points: pts.into_iter().map(|(p, _)| p).collect(),
        keypoints,
        keypoint_point,
        outlier,
    }
}

impl SyntheticScene {
    pub fn diagonal(&self) -> f64 {
        let (w, h) = self.spec.image_size;
        (w * w + h * h).sqrt()
    }

    pub fn n_images(&self) -> usize {
        self.cameras.len()
    }

    fn keypoint_of(&self, image: usize) -> BTreeMap<usize, usize> {
        self.keypoint_point[image]
            .iter()
            .enumerate()
            .map(|(k, &p)| (p, k))
            .collect()
    }

    /// Point index to keypoint index, per image.
    pub fn visibility(&self) -> Vec<BTreeMap<usize, usize>> {
        (0..self.n_images()).map(|i| self.keypoint_of(i)).collect()
    }

    /// True correspondences of every image pair sharing at least one point.
    pub fn matches(&self) -> BTreeMap<(ImageId, ImageId), Vec<(usize, usize)>> {
        let vis = self.visibility();
        let mut out = BTreeMap::new();
        for i in 0..vis.len() {
            for j in i + 1..vis.len() {
                let m: Vec<(usize, usize)> = vis[i]
                    .iter()
                    .filter_map(|(p, &ka)| vis[j].get(p).map(|&kb| (ka, kb)))
                    .collect();
                if !m.is_empty() {
                    out.insert((i, j), m);
                }
            }
        }
        out
    }

    /// True tracks spanning at least `min_len` images, in point order.
    pub fn tracks(&self, min_len: usize) -> TrackSet {
        let vis = self.visibility();
        let mut tracks: Vec<Track> = (0..self.points.len())
            .map(|p| {
                vis.iter()
                    .enumerate()
                    .filter_map(|(i, m)| m.get(&p).map(|&k| (i, k)))
                    .collect::<Track>()
            })
            .filter(|t| t.len() >= min_len)
            .collect();
        tracks.sort_by(|a, b| a.iter().next().cmp(&b.iter().next()));
        TrackSet { tracks }
    }

    /// Ground-truth cameras and points with the generated (noisy) image
    /// observations; outlier observations are left out.
    pub fn truth_model(&self) -> Model {
        let mut m = Model::new(Frame::Euclidean);
        for (i, c) in self.cameras.iter().enumerate() {
            m.cameras.insert(i, Camera::Euclidean(c.clone()));
        }
        let vis = self.visibility();
        for (p, x) in self.points.iter().enumerate() {
            let track: Vec<Observation> = vis
                .iter()
                .enumerate()
                .filter_map(|(i, v)| {
                    let &k = v.get(&p)?;
                    (!self.outlier[i][k]).then(|| Observation {
                        image: i,
                        keypoint: k,
                        xy: self.keypoints[i][k].xy,
                    })
                })
                .collect();
            if let Ok(mut tp) = TiePoint::new(track) {
                tp.set_position(*x);
                m.tie_points.insert(p, tp);
            }
        }
        m
    }

    pub fn intrinsics(&self) -> BTreeMap<ImageId, Intrinsics> {
        self.cameras
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.intrinsics))
            .collect()
    }

    pub fn image_sizes(&self) -> BTreeMap<ImageId, (f64, f64)> {
        (0..self.n_images())
            .map(|i| (i, self.spec.image_size))
            .collect()
    }

    /// Engine image descriptions, with the true intrinsics when `calibrated`.
    pub fn engine_images(&self, calibrated: bool) -> Vec<ImageInfo> {
        self.cameras
            .iter()
            .zip(&self.keypoints)
            .map(|(c, kps)| ImageInfo {
                size: self.spec.image_size,
                keypoints: kps.iter().map(|k| k.xy).collect(),
                intrinsics: calibrated.then_some(c.intrinsics),
            })
            .collect()
    }

    /// Geometric verification of the true correspondences of every pair.
    pub fn verified_edges(&self, config: &NarrowConfig) -> Vec<EpipolarEdge> {
        let xy: Vec<Vec<Vector2<f64>>> = self
            .keypoints
            .iter()
            .map(|k| k.iter().map(|p| p.xy).collect())
            .collect();
        self.matches()
            .iter()
            .filter_map(|(&(a, b), m)| verify_matches((a, b), &xy[a], &xy[b], m, config).ok())
            .collect()
    }

    /// True cameras `ids` and, keyed by track index, the true position of
    /// every track with two or more of those images.
    pub fn model_on_tracks(&self, tracks: &TrackSet, ids: &[ImageId]) -> Model {
        let mut m = Model::new(Frame::Euclidean);
        for &i in ids {
            m.cameras
                .insert(i, Camera::Euclidean(self.cameras[i].clone()));
        }
        for (tid, t) in tracks.tracks.iter().enumerate() {
            let track: Vec<Observation> = t
                .iter()
                .map(|(&image, &keypoint)| Observation {
                    image,
                    keypoint,
                    xy: self.keypoints[image][keypoint].xy,
                })
                .collect();
            let Ok(mut tp) = TiePoint::new(track) else {
                continue;
            };
            if m.observations_in_model(&tp).count() < 2 {
                continue;
            }
            if let Some(p) = true_point(self, &tp) {
                tp.set_position(self.points[p]);
                m.tie_points.insert(tid, tp);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TruthError {
    #[error("need at least 3 model points with known ground truth, got {0}")]
    TooFewCorrespondences(usize),
}

#[derive(Debug, Clone)]
pub struct TruthComparison {
    /// RMS distance between aligned model points and true points.
    pub similarity_rms: f64,
    pub similarity: Similarity,
    pub points_compared: usize,
    /// Relative focal error per Euclidean camera.
    pub focal_errors: BTreeMap<ImageId, f64>,
    /// Rotation error in radians and aligned centre distance per camera.
    pub pose_errors: BTreeMap<ImageId, (f64, f64)>,
}

impl TruthComparison {
    pub fn max_focal_error(&self) -> f64 {
        self.focal_errors.values().fold(0.0, |a, &b| a.max(b))
    }
}

/// Point index a tie-point images, by majority over its observations.
fn true_point(scene: &SyntheticScene, tp: &TiePoint) -> Option<usize> {
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for o in &tp.track {
        let p = *scene.keypoint_point.get(o.image)?.get(o.keypoint)?;
        *votes.entry(p).or_default() += 1;
    }
    votes
        .into_iter()
        .max_by_key(|&(p, c)| (c, std::cmp::Reverse(p)))
        .map(|(p, _)| p)
}

/// Aligns the model's points to the truth with a similarity and reports
/// point RMS, focal and pose errors.
pub fn compare_to_truth(
    model: &Model,
    scene: &SyntheticScene,
) -> Result<TruthComparison, TruthError> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut seen = BTreeSet::new();
    for (_, tp) in model.triangulated() {
        if let Some(p) = true_point(scene, tp) {
            if seen.insert(p) {
                a.push(tp.position.unwrap());
                b.push(scene.points[p]);
            }
        }
    }
    if a.len() < 3 {
        return Err(TruthError::TooFewCorrespondences(a.len()));
    }
    let s = absolute_orientation_similarity(&a, &b)
        .map_err(|_| TruthError::TooFewCorrespondences(a.len()))?;
    let rms = (s.sum_squared_residual(&a, &b) / a.len() as f64).sqrt();
    let mut focal_errors = BTreeMap::new();
    let mut pose_errors = BTreeMap::new();
    for (&id, cam) in &model.cameras {
        let (Some(e), Some(t)) = (cam.as_euclidean(), scene.cameras.get(id)) else {
            continue;
        };
        let f_true = t.intrinsics.focal();
        focal_errors.insert(id, (e.intrinsics.focal() - f_true).abs() / f_true);
        // World-to-camera rotation in the true frame is R * Rs^T.
        let r_aligned = e.rotation * s.rotation.transpose();
        let angle = rotation_angle_between(&r_aligned, &t.rotation);
        let dist = (s.apply(&e.center) - t.center).norm();
        pose_errors.insert(id, (angle, dist));
    }
    Ok(TruthComparison {
        similarity_rms: rms,
        similarity: s,
        points_compared: a.len(),
        focal_errors,
        pose_errors,
    })
}

/// Structure RMS after bundle adjustment with fixed intrinsics started from
/// the truth: the accuracy attainable at the scene's noise level.
pub fn baseline_rms(scene: &SyntheticScene) -> Result<f64, TruthError> {
    let mut m = scene.truth_model();
    let problem = BaProblem::full(&m, Parameterization::EuclideanFixedK);
    let _ = adjust(&mut m, &problem, &BaOptions::default());
    compare_to_truth(&m, scene).map(|c| c.similarity_rms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_points_seen_three_times() {
        let s = generate(&SceneSpec::new(SceneKind::Ring, 8, 500, 1));
        let t = s.tracks(1);
        let short = t.tracks.iter().filter(|t| t.len() < 3).count();
        assert_eq!(short, 0, "{} of {} tracks", short, t.len());
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec::new(SceneKind::Ring, 6, 200, 7).with_noise(0.5, 0.02);
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.keypoints, b.keypoints);
    }

    #[test]
    fn truth_compares_to_zero() {
        let s = generate(&SceneSpec::new(SceneKind::Ring, 6, 200, 3));
        let c = compare_to_truth(&s.truth_model(), &s).unwrap();
        assert!(c.similarity_rms < 1e-10);
        assert!(c.max_focal_error() < 1e-12);
    }

    #[test]
    fn every_kind_generates() {
        for kind in [
            SceneKind::Ring,
            SceneKind::Grid,
            SceneKind::TwoCluster,
            SceneKind::Planar,
            SceneKind::LowParallax,
        ] {
            let s = generate(&SceneSpec::new(kind, 6, 300, 2));
            assert_eq!(SceneKind::parse(kind.name()), Some(kind));
            assert!(s.keypoints.iter().all(|k| k.len() > 20), "{kind:?}");
        }
    }
}
