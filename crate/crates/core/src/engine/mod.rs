//! Dendrogram-driven structure and motion: stereo models at the leaves,
//! resection-intersection when a single image joins a model, and model
//! merging, in calibrated and autocalibrated modes.

mod actions;
mod align;

pub use actions::{canonical_second_camera, snap_intrinsics};

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector2;
use thiserror::Error;

use crate::autocalib::{AutocalibConfig, AutocalibError};
use crate::bundle::{adjust, BaOptions, BaProblem, BaReport, Parameterization};
use crate::clustering::{
    affinity_matrix, distances_from_affinity, ClusterState, Dendrogram, PlannedAction,
};
use crate::epipolar_graph::TrackSet;
use crate::geometry::linalg::median;
use crate::geometry::{
    triangulate, Camera, Frame, ImageId, Intrinsics, Model, Observation, TiePoint, TiePointStatus,
};
use crate::robust::TwoViewModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Calibrated,
    Autocalibrated,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Calibrated => "calibrated",
            Mode::Autocalibrated => "autocalibrated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "calibrated" => Some(Mode::Calibrated),
            "autocalibrated" => Some(Mode::Autocalibrated),
            _ => None,
        }
    }
}

/// Thresholds given as divisors of the image diagonal are resolved per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub mode: Mode,
    /// Reprojection threshold is `D / reproj_divisor`.
    pub reproj_divisor: f64,
    pub final_reproj_divisor: f64,
    /// Two-view MSAC residual cap is `D / match_divisor`.
    pub match_divisor: f64,
    pub bucket_divisor: f64,
    pub condition_limit: f64,
    pub min_track_length: usize,
    pub final_min_track_length: usize,
    pub autocal_min_cameras: usize,
    pub fix_internals_after: usize,
    pub cluster_l: usize,
    pub local_ba: bool,
    pub ba: BaOptions,
    pub msac_iterations: usize,
    /// Guessed focal length as a multiple of the longer image side.
    pub focal_guess_factor: f64,
    /// Largest tolerated fraction of points behind a stereo pair.
    pub cheirality_tolerance: f64,
    pub min_model_points: usize,
    /// Autocalibrated models refine one set of intrinsics for all cameras.
    pub shared_intrinsics: bool,
    pub seed: u64,
    pub autocal: AutocalibConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Calibrated,
            reproj_divisor: 1800.0,
            final_reproj_divisor: 2400.0,
            match_divisor: 600.0,
            bucket_divisor: 25.0,
            condition_limit: 1e4,
            min_track_length: 3,
            final_min_track_length: 2,
            autocal_min_cameras: 4,
            fix_internals_after: 25,
            cluster_l: 3,
            local_ba: true,
            ba: BaOptions::default(),
            msac_iterations: 1000,
            focal_guess_factor: 1.2,
            cheirality_tolerance: 0.1,
            min_model_points: 10,
            shared_intrinsics: true,
            seed: 0,
            autocal: AutocalibConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInfo {
    pub size: (f64, f64),
    pub keypoints: Vec<Vector2<f64>>,
    pub intrinsics: Option<Intrinsics>,
}

impl ImageInfo {
    pub fn diagonal(&self) -> f64 {
        self.size.0.hypot(self.size.1)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionError {
    #[error("rejected a priori: {0}")]
    APriori(String),
    #[error("rejected a posteriori: {0}")]
    APosteriori(String),
    #[error("too few correspondences ({found})")]
    TooFewCorrespondences { found: usize },
    #[error("resection failed: {0}")]
    ResectionFailed(String),
    #[error("too few common tie-points ({found})")]
    TooFewCommonPoints { found: usize },
    #[error("alignment failed: {0}")]
    AlignmentFailed(String),
    #[error("upgrade failed: {0}")]
    UpgradeFailed(#[from] AutocalibError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("no stereo model could be built")]
    NoModel,
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionRecord {
    pub clusters: (usize, usize),
    pub action: PlannedAction,
    pub images: Vec<ImageId>,
    pub outcome: Result<(usize, usize), ActionError>,
}

impl ActionRecord {
    pub fn line(&self) -> String {
        let what = match self.action {
            PlannedAction::StereoModel => "stereo",
            PlannedAction::ResectionIntersection => "resection",
            PlannedAction::Merge => "merge",
        };
        match &self.outcome {
            Ok((c, p)) => format!("{what} {:?}: ok, {c} cameras, {p} points", self.images),
            Err(e) => format!("{what} {:?}: {e}", self.images),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineOutput {
    pub models: Vec<Model>,
    pub actions: Vec<ActionRecord>,
    pub dendrogram: Dendrogram,
}

/// Mutable state shared by the node actions of one run.
pub struct Engine<'a> {
    images: &'a [ImageInfo],
    tracks: &'a TrackSet,
    pair_class: &'a BTreeMap<(ImageId, ImageId), TwoViewModel>,
    pub config: EngineConfig,
    by_image: Vec<Vec<usize>>,
    /// Largest model each camera has been bundle-adjusted in.
    adjusted_in: BTreeMap<ImageId, usize>,
    min_len: usize,
    reproj_divisor: f64,
}

impl<'a> Engine<'a> {
    pub fn new(
        images: &'a [ImageInfo],
        tracks: &'a TrackSet,
        pair_class: &'a BTreeMap<(ImageId, ImageId), TwoViewModel>,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        if config.mode == Mode::Calibrated {
            if let Some(i) = images.iter().position(|im| im.intrinsics.is_none()) {
                return Err(EngineError::Config(format!(
                    "calibrated mode needs intrinsics for every image (missing for image {i})"
                )));
            }
        }
        if config.reproj_divisor <= 0.0 || config.final_reproj_divisor <= 0.0 {
            return Err(EngineError::Config("thresholds must be positive".into()));
        }
        let mut by_image = vec![Vec::new(); images.len()];
        for (tid, t) in tracks.tracks.iter().enumerate() {
            for (&img, &kp) in t {
                if img >= images.len() || kp >= images[img].keypoints.len() {
                    return Err(EngineError::Config(format!(
                        "track {tid} references keypoint {kp} of image {img}, which does not exist"
                    )));
                }
                by_image[img].push(tid);
            }
        }
        Ok(Self {
            images,
            tracks,
            pair_class,
            min_len: config.min_track_length,
            reproj_divisor: config.reproj_divisor,
            config,
            by_image,
            adjusted_in: BTreeMap::new(),
        })
    }

    /// Reprojection threshold of an image at the current stage.
    pub fn threshold(&self, image: ImageId) -> f64 {
        self.images[image].diagonal() / self.reproj_divisor
    }

    fn image_sizes(&self) -> BTreeMap<ImageId, (f64, f64)> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, im)| (i, im.size))
            .collect()
    }

    fn tie_point(&self, tid: usize) -> TiePoint {
        let track = self.tracks.tracks[tid]
            .iter()
            .map(|(&image, &keypoint)| Observation {
                image,
                keypoint,
                xy: self.images[image].keypoints[keypoint],
            })
            .collect();
        TiePoint::new(track).expect("tracks visit an image once and have two members")
    }

    /// All reprojection errors of triangulated points.
    fn residual_population(model: &Model) -> Vec<f64> {
        model
            .triangulated()
            .flat_map(|(_, tp)| model.reprojection_errors(tp).into_iter().map(|(_, e)| e))
            .collect()
    }

    fn front_ok(model: &Model, tp: &TiePoint, x: &nalgebra::Vector3<f64>) -> bool {
        model
            .observations_in_model(tp)
            .all(|o| model.cameras[&o.image].depth(x) > 0.0)
    }

    fn within_threshold(&self, model: &Model, tp: &TiePoint) -> bool {
        model
            .reprojection_errors(tp)
            .iter()
            .all(|&(img, e)| e <= self.threshold(img))
    }

    /// Triangulates every eligible track with two or more images in the
    /// model that has no accepted position yet. Returns the number of new
    /// tie-points.
    pub fn intersect_pending(&self, model: &mut Model) -> usize {
        let population = Self::residual_population(model);
        let x84 = median(&population).map(|med| {
            let dev: Vec<f64> = population.iter().map(|e| (e - med).abs()).collect();
            (med, 5.2 * median(&dev).unwrap_or(0.0))
        });
        let mut candidates = BTreeSet::new();
        for &img in model.cameras.keys() {
            for &tid in &self.by_image[img] {
                if self.tracks.tracks[tid].len() >= self.min_len {
                    candidates.insert(tid);
                }
            }
        }
        let mut added = 0;
        for tid in candidates {
            if model
                .tie_points
                .get(&tid)
                .is_some_and(|tp| tp.is_triangulated())
            {
                continue;
            }
            let mut tp = model
                .tie_points
                .remove(&tid)
                .unwrap_or_else(|| self.tie_point(tid));
            let obs: Vec<(&Camera, Vector2<f64>)> = model
                .observations_in_model(&tp)
                .map(|o| (&model.cameras[&o.image], o.xy))
                .collect();
            if obs.len() < 2 {
                continue;
            }
            let accepted = triangulate(&obs, self.config.condition_limit)
                .ok()
                .and_then(|t| {
                    if !Self::front_ok(model, &tp, &t.point) {
                        return None;
                    }
                    let mut probe = tp.clone();
                    probe.set_position(t.point);
                    let errors = model.reprojection_errors(&probe);
                    let within = errors.iter().all(|&(img, e)| e <= self.threshold(img));
                    let x84_ok = errors.iter().all(|&(img, e)| {
                        e <= 0.1 * self.threshold(img)
                            || x84.is_none_or(|(med, bound)| (e - med).abs() < bound)
                    });
                    (within && x84_ok).then_some(t.point)
                });
            match accepted {
                Some(x) => {
                    tp.set_position(x);
                    added += 1;
                }
                None => {
                    tp.position = None;
                    tp.status = TiePointStatus::Pending;
                }
            }
            model.tie_points.insert(tid, tp);
        }
        added
    }

    /// Rejects triangulated points that exceed the threshold in any camera
    /// or lie behind a calibrated camera. Returns the number rejected.
    pub fn prune(&self, model: &mut Model) -> usize {
        let bad: Vec<usize> = model
            .triangulated()
            .filter(|(_, tp)| {
                let x = tp.position.unwrap();
                !self.within_threshold(model, tp) || !Self::front_ok(model, tp, &x)
            })
            .map(|(id, _)| id)
            .collect();
        for id in &bad {
            model.tie_points.get_mut(id).unwrap().reject();
        }
        bad.len()
    }

    fn parameterization(&self, model: &Model) -> Parameterization {
        match (model.frame, self.config.mode) {
            (Frame::Projective, _) => Parameterization::Projective,
            (Frame::Euclidean, Mode::Calibrated) => Parameterization::EuclideanFixedK,
            (Frame::Euclidean, Mode::Autocalibrated) => Parameterization::EuclideanFreeK,
        }
    }

    /// Bundle adjustment over `free` cameras (all when `None`) with the
    /// anchoring rule for the rest of the model.
    pub fn bundle(
        &mut self,
        model: &mut Model,
        free: Option<&BTreeSet<ImageId>>,
    ) -> Option<BaReport> {
        let mut problem = match free {
            Some(a) => select_local_ba_scope(model, a),
            None => BaProblem::full(model, self.parameterization(model)),
        };
        problem.parameterization = self.parameterization(model);
        problem.frozen_intrinsics = problem
            .free
            .iter()
            .filter(|id| {
                self.adjusted_in.get(id).copied().unwrap_or(0) >= self.config.fix_internals_after
            })
            .copied()
            .collect();
        if problem.parameterization == Parameterization::EuclideanFreeK
            && self.config.shared_intrinsics
        {
            let movable: Vec<ImageId> = problem
                .free
                .difference(&problem.frozen_intrinsics)
                .copied()
                .collect();
            equalize_intrinsics(model, &movable);
            problem.shared_intrinsics = true;
        }
        let report = adjust(model, &problem, &self.config.ba).ok()?;
        let n = model.cameras.len();
        for &id in &problem.free {
            let e = self.adjusted_in.entry(id).or_default();
            *e = (*e).max(n);
        }
        Some(report)
    }

    /// Intersection, bundle adjustment and pruning after a camera set change.
    /// Gross inconsistencies are removed at the matching threshold before
    /// the adjustment, the reprojection threshold applies after it.
    fn consolidate(&mut self, model: &mut Model, local: Option<&BTreeSet<ImageId>>) {
        self.reproj_divisor = self.config.match_divisor;
        self.prune(model);
        self.intersect_pending(model);
        self.reproj_divisor = self.config.reproj_divisor;
        let use_local = local.filter(|_| self.config.local_ba && model.frame == Frame::Euclidean);
        self.bundle(model, use_local);
        self.prune(model);
        self.intersect_pending(model);
    }

    /// Whether an action result kept enough of its inputs' tie-points.
    fn retained(&self, result: &Model, inputs: &[&Model]) -> bool {
        let largest = inputs
            .iter()
            .map(|m| m.triangulated_count())
            .max()
            .unwrap_or(0);
        let n = result.triangulated_count();
        n >= self.config.min_model_points && 2 * n >= largest
    }

    fn mean_error(model: &Model) -> f64 {
        model.reprojection_stats().0
    }

    /// Image distances from the affinity of their tie-point coverage.
    pub fn distances(&self) -> Vec<Vec<f64>> {
        let n = self.images.len();
        let per_image: Vec<BTreeMap<usize, Vector2<f64>>> = (0..n)
            .map(|i| {
                self.by_image[i]
                    .iter()
                    .map(|&tid| (tid, self.images[i].keypoints[self.tracks.tracks[tid][&i]]))
                    .collect()
            })
            .collect();
        let areas: Vec<f64> = self.images.iter().map(|im| im.size.0 * im.size.1).collect();
        distances_from_affinity(&affinity_matrix(&per_image, &areas))
    }

    /// Traverses the balanced dendrogram, building and merging models.
    pub fn run(&mut self) -> Result<EngineOutput, EngineError> {
        let mut state = ClusterState::new(&self.distances(), self.config.cluster_l);
        let mut models: BTreeMap<usize, Model> = BTreeMap::new();
        let mut rejected = BTreeSet::new();
        let mut actions = Vec::new();
        while let Ok((a, b)) = state.next_merge(&rejected) {
            let ia = state.images(a).unwrap().to_vec();
            let ib = state.images(b).unwrap().to_vec();
            let (action, result) = match (models.get(&a), models.get(&b)) {
                (None, None) => (PlannedAction::StereoModel, self.stereo_model(ia[0], ib[0])),
                (Some(m), None) => (
                    PlannedAction::ResectionIntersection,
                    self.resection_intersection(m, ib[0]),
                ),
                (None, Some(m)) => (
                    PlannedAction::ResectionIntersection,
                    self.resection_intersection(m, ia[0]),
                ),
                (Some(ma), Some(mb)) => (PlannedAction::Merge, self.merge_models(ma, mb)),
            };
            let result = result.and_then(|m| self.maybe_upgrade(m));
            let mut images: Vec<ImageId> = ia.iter().chain(&ib).copied().collect();
            images.sort_unstable();
            let outcome = match result {
                Ok(model) => {
                    let id = state.merge(a, b).expect("active clusters");
                    models.remove(&a);
                    models.remove(&b);
                    let summary = (model.cameras.len(), model.triangulated_count());
                    models.insert(id, model);
                    Ok(summary)
                }
                Err(e) => {
                    rejected.insert((a.min(b), a.max(b)));
                    Err(e)
                }
            };
            actions.push(ActionRecord {
                clusters: (a, b),
                action,
                images,
                outcome,
            });
        }
        if models.is_empty() {
            return Err(EngineError::NoModel);
        }
        let models = models.into_values().map(|m| self.finalize(m)).collect();
        Ok(EngineOutput {
            models,
            actions,
            dendrogram: state.dendrogram,
        })
    }

    /// Full bundle adjustment with the final threshold, then intersection of
    /// the shortest tracks.
    pub fn finalize(&mut self, mut model: Model) -> Model {
        self.reproj_divisor = self.config.final_reproj_divisor;
        self.bundle(&mut model, None);
        self.prune(&mut model);
        self.min_len = self.config.final_min_track_length;
        self.intersect_pending(&mut model);
        self.prune(&mut model);
        self.min_len = self.config.min_track_length;
        self.reproj_divisor = self.config.reproj_divisor;
        model
    }
}

/// Sets the intrinsics of `ids` to their component-wise median.
fn equalize_intrinsics(model: &mut Model, ids: &[ImageId]) {
    let ks: Vec<(crate::geometry::Intrinsics, f64)> = ids
        .iter()
        .filter_map(|id| {
            model.cameras[id]
                .as_euclidean()
                .map(|c| (c.intrinsics, c.radial))
        })
        .collect();
    if ks.len() < 2 {
        return;
    }
    let med = |f: &dyn Fn(&(crate::geometry::Intrinsics, f64)) -> f64| {
        median(&ks.iter().map(f).collect::<Vec<_>>()).unwrap()
    };
    let fx = med(&|k| k.0.fx);
    let fy = med(&|k| k.0.fy);
    let skew = med(&|k| k.0.skew);
    let cx = med(&|k| k.0.cx);
    let cy = med(&|k| k.0.cy);
    let radial = med(&|k| k.1);
    for id in ids {
        if let Some(Camera::Euclidean(c)) = model.cameras.get_mut(id) {
            c.intrinsics = crate::geometry::Intrinsics {
                fx,
                fy,
                skew,
                cx,
                cy,
            };
            c.radial = radial;
        }
    }
}

/// Local bundle-adjustment scope after adding the cameras `a` to a model:
/// free are `a` and the cameras sharing a tie-point with `a`; fixed are the
/// remaining cameras observing an active tie-point.
pub fn select_local_ba_scope(model: &Model, a: &BTreeSet<ImageId>) -> BaProblem {
    let mut free: BTreeSet<ImageId> = a.clone();
    for (_, tp) in model.triangulated() {
        let cams: Vec<ImageId> = model.observations_in_model(tp).map(|o| o.image).collect();
        if cams.iter().any(|c| a.contains(c)) {
            free.extend(cams);
        }
    }
    let mut active = BTreeSet::new();
    let mut fixed = BTreeSet::new();
    for (id, tp) in model.triangulated() {
        let cams: Vec<ImageId> = model.observations_in_model(tp).map(|o| o.image).collect();
        if cams.iter().any(|c| free.contains(c)) {
            active.insert(id);
            fixed.extend(cams.into_iter().filter(|c| !free.contains(c)));
        }
    }
    BaProblem {
        free,
        fixed,
        active,
        parameterization: Parameterization::EuclideanFixedK,
        refine_radial: false,
        frozen_intrinsics: BTreeSet::new(),
        shared_intrinsics: false,
    }
}

/// Tracks (of at least `min_len` images) and model classes of verified
/// image pairs.
pub fn graph_input(
    edges: &[crate::epipolar_graph::EpipolarEdge],
    min_len: usize,
) -> (TrackSet, BTreeMap<(ImageId, ImageId), TwoViewModel>) {
    let tracks = crate::epipolar_graph::tracks_from_matches(
        edges.iter().map(|e| (e.pair, e.matches.as_slice())),
        min_len,
    );
    let classes = edges
        .iter()
        .map(|e| {
            (
                (e.pair.0.min(e.pair.1), e.pair.0.max(e.pair.1)),
                e.model_class,
            )
        })
        .collect();
    (tracks, classes)
}
