use std::collections::BTreeSet;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector2, Vector3};

use super::align::{transform_point, AlignProblem, Common};
use super::{ActionError, Engine, Mode};
use crate::autocalib::{upgrade, upgrade_with_focals};
use crate::geometry::linalg::skew;
use crate::geometry::{
    cheirality_counts, cheirality_enforce, essential_from_fundamental, project_to_essential,
    refine_pose, relative_orientation, triangulate, Camera, EuclideanCamera, Frame, ImageId, Model,
    TiePointStatus,
};
use crate::robust::{
    msac, FundamentalProblem, MsacConfig, ProjectiveResectionProblem, ResectionProblem,
    TwoViewModel,
};

/// Zero skew and unit aspect ratio, keeping the mean focal length.
pub fn snap_intrinsics(camera: &EuclideanCamera) -> EuclideanCamera {
    let mut c = camera.clone();
    let f = 0.5 * (c.intrinsics.fx + c.intrinsics.fy);
    c.intrinsics.fx = f;
    c.intrinsics.fy = f;
    c.intrinsics.skew = 0.0;
    c
}

/// `P2 = [[e2]x F | e2]` with `F^T e2 = 0`, for the first camera `[I | 0]`.
pub fn canonical_second_camera(f: &Matrix3<f64>) -> Result<Matrix3x4<f64>, ActionError> {
    let svd = f.svd(true, false);
    let sv = svd.singular_values;
    let (imax, imin) = (sv.imax(), sv.imin());
    let mid = 3 - imax - imin;
    if imax == imin || sv[mid] <= 1e-9 * sv[imax] {
        return Err(ActionError::APriori(
            "fundamental matrix has rank below two".into(),
        ));
    }
    let e2 = svd.u.unwrap().column(imin).into_owned();
    let mut p2 = Matrix3x4::zeros();
    p2.fixed_view_mut::<3, 3>(0, 0).copy_from(&(skew(&e2) * f));
    p2.set_column(3, &e2);
    Ok(p2)
}

fn to_projective(model: &mut Model) {
    for cam in model.cameras.values_mut() {
        *cam = Camera::Projective(cam.matrix());
    }
    model.frame = Frame::Projective;
}

fn euclidean_from_matrix(p: &Matrix3x4<f64>) -> Option<EuclideanCamera> {
    EuclideanCamera::from_matrix(p)
        .ok()
        .map(|c| snap_intrinsics(&c))
}

impl Engine<'_> {
    fn msac_config(&self, threshold: f64, image: ImageId, stream: u64) -> MsacConfig {
        let mut c = MsacConfig::new(
            threshold,
            self.images[image].diagonal() / self.config.bucket_divisor,
            self.config.seed,
        )
        .with_stream(stream);
        c.max_iterations = self.config.msac_iterations;
        c
    }

    fn mean_threshold(&self, model: &Model) -> f64 {
        let n = model.cameras.len().max(1) as f64;
        model
            .cameras
            .keys()
            .map(|&i| self.threshold(i))
            .sum::<f64>()
            / n
    }

    /// Fundamental matrix of an image pair (`x_b^T F x_a = 0`) with the
    /// inlier correspondences.
    fn pair_fundamental(
        &self,
        a: ImageId,
        b: ImageId,
    ) -> Result<(Matrix3<f64>, Vec<(Vector2<f64>, Vector2<f64>)>), ActionError> {
        match self.pair_class.get(&(a.min(b), a.max(b))) {
            Some(TwoViewModel::Fundamental) => {}
            Some(TwoViewModel::Homography) => {
                return Err(ActionError::APriori(
                    "a homography explains the pair".into(),
                ))
            }
            None => {
                return Err(ActionError::APriori(
                    "the images share no epipolar edge".into(),
                ))
            }
        }
        let (mut xa, mut xb) = (Vec::new(), Vec::new());
        for t in &self.tracks.tracks {
            if let (Some(&ka), Some(&kb)) = (t.get(&a), t.get(&b)) {
                xa.push(self.images[a].keypoints[ka]);
                xb.push(self.images[b].keypoints[kb]);
            }
        }
        if xa.len() < self.config.min_model_points {
            return Err(ActionError::TooFewCorrespondences { found: xa.len() });
        }
        let threshold =
            self.images[a].diagonal().min(self.images[b].diagonal()) / self.config.match_divisor;
        let stream = (a * self.images.len() + b) as u64;
        let fit = msac(
            &FundamentalProblem { a: &xa, b: &xb },
            &self.msac_config(threshold, a, stream),
        )
        .map_err(|e| ActionError::APriori(e.to_string()))?;
        let pairs: Vec<_> = fit.inliers().into_iter().map(|i| (xa[i], xb[i])).collect();
        if pairs.len() < self.config.min_model_points {
            return Err(ActionError::APriori(format!(
                "{} epipolar inliers",
                pairs.len()
            )));
        }
        Ok((fit.model, pairs))
    }

    /// Two-image model: relative orientation when calibrated, canonical
    /// projective pair upgraded with guessed focal lengths otherwise.
    pub fn stereo_model(&mut self, a: ImageId, b: ImageId) -> Result<Model, ActionError> {
        let (f, pairs) = self.pair_fundamental(a, b)?;
        let model = match self.config.mode {
            Mode::Calibrated => {
                let ka = self.images[a].intrinsics.expect("validated");
                let kb = self.images[b].intrinsics.expect("validated");
                let e = project_to_essential(&essential_from_fundamental(
                    &f,
                    &ka.matrix(),
                    &kb.matrix(),
                ));
                let (ia, ib) = (
                    ka.matrix().try_inverse().unwrap(),
                    kb.matrix().try_inverse().unwrap(),
                );
                let normalized: Vec<_> = pairs
                    .iter()
                    .map(|(p, q)| ((ia * p.push(1.0)).xy(), (ib * q.push(1.0)).xy()))
                    .collect();
                let pose = relative_orientation(&e, &normalized)
                    .map_err(|e| ActionError::APosteriori(e.to_string()))?;
                let mut m = Model::new(Frame::Euclidean);
                m.cameras.insert(
                    a,
                    Camera::Euclidean(EuclideanCamera::new(
                        ka,
                        Matrix3::identity(),
                        Vector3::zeros(),
                    )),
                );
                let center = -pose.rotation.transpose() * pose.translation;
                m.cameras.insert(
                    b,
                    Camera::Euclidean(EuclideanCamera::new(kb, pose.rotation, center)),
                );
                m
            }
            Mode::Autocalibrated => self.projective_pair(a, b, &f)?,
        };
        self.finish_stereo(model)
    }

    fn projective_pair(
        &self,
        a: ImageId,
        b: ImageId,
        f: &Matrix3<f64>,
    ) -> Result<Model, ActionError> {
        let p2 = canonical_second_camera(f)?;
        let mut model = Model::new(Frame::Projective);
        model
            .cameras
            .insert(a, Camera::Projective(Matrix3x4::identity()));
        model.cameras.insert(b, Camera::Projective(p2));
        for (tid, t) in self.tracks.tracks.iter().enumerate() {
            if t.len() < self.min_len || !t.contains_key(&a) || !t.contains_key(&b) {
                continue;
            }
            let mut tp = self.tie_point(tid);
            let obs: Vec<_> = model
                .observations_in_model(&tp)
                .map(|o| (&model.cameras[&o.image], o.xy))
                .collect();
            if let Ok(tr) = triangulate(&obs, f64::INFINITY) {
                tp.set_position(tr.point);
                model.tie_points.insert(tid, tp);
            }
        }
        let factor = self.config.focal_guess_factor;
        let mut up = upgrade_with_focals(&model, &self.image_sizes(), |id| {
            let (w, h) = self.images[id].size;
            factor * w.max(h)
        })
        .map_err(|e| ActionError::APosteriori(e.to_string()))?;
        to_projective(&mut up);
        up.tie_points.clear();
        Ok(up)
    }

    fn behind_fraction(model: &Model) -> f64 {
        let (front, behind) = cheirality_counts(model);
        behind as f64 / (front + behind).max(1) as f64
    }

    fn finish_stereo(&mut self, mut model: Model) -> Result<Model, ActionError> {
        let mut probe = model.clone();
        let ids = model.camera_ids();
        for (tid, t) in self.tracks.tracks.iter().enumerate() {
            if t.len() < self.min_len || !ids.iter().all(|i| t.contains_key(i)) {
                continue;
            }
            let mut tp = self.tie_point(tid);
            let obs: Vec<_> = probe
                .observations_in_model(&tp)
                .map(|o| (&probe.cameras[&o.image], o.xy))
                .collect();
            if let Ok(tr) = triangulate(&obs, f64::INFINITY) {
                tp.set_position(tr.point);
                probe.tie_points.insert(tid, tp);
            }
        }
        let tolerance = self.config.cheirality_tolerance;
        if Self::behind_fraction(&probe) > tolerance {
            return Err(ActionError::APosteriori(
                "too many points behind the cameras".into(),
            ));
        }
        // The pair geometry is only as accurate as the two-view fit, so the
        // first intersection uses the matching threshold.
        self.reproj_divisor = self.config.match_divisor;
        self.intersect_pending(&mut model);
        self.reproj_divisor = self.config.reproj_divisor;
        if model.triangulated_count() < self.config.min_model_points {
            return Err(ActionError::APosteriori(format!(
                "{} tie-points pass the intersection gates",
                model.triangulated_count()
            )));
        }
        self.bundle(&mut model, None);
        self.prune(&mut model);
        self.intersect_pending(&mut model);
        self.bundle(&mut model, None);
        if Self::behind_fraction(&model) > tolerance {
            return Err(ActionError::APosteriori(
                "too many points behind the cameras after adjustment".into(),
            ));
        }
        self.prune(&mut model);
        if model.triangulated_count() < self.config.min_model_points {
            return Err(ActionError::APosteriori(
                "too few tie-points after adjustment".into(),
            ));
        }
        let mean = super::Engine::mean_error(&model);
        if mean > self.mean_threshold(&model) {
            return Err(ActionError::APosteriori(format!(
                "mean reprojection error {mean:.3} px"
            )));
        }
        Ok(model)
    }

    /// Adds one image to a model by resection, then intersects, adjusts and
    /// prunes.
    pub fn resection_intersection(
        &mut self,
        model: &Model,
        image: ImageId,
    ) -> Result<Model, ActionError> {
        let mut points3d = Vec::new();
        let mut points2d = Vec::new();
        for &tid in &self.by_image[image] {
            if self.tracks.tracks[tid].len() < self.min_len {
                continue;
            }
            if let Some(x) = model.tie_points.get(&tid).and_then(|tp| tp.position) {
                points3d.push(x);
                points2d.push(self.images[image].keypoints[self.tracks.tracks[tid][&image]]);
            }
        }
        let threshold = self.threshold(image);
        let stream = (self.images.len() * self.images.len() + image) as u64;
        let config = self.msac_config(threshold, image, stream);
        let calibrated = self.config.mode == Mode::Calibrated;
        let needed = if calibrated { 4 } else { 6 };
        if points3d.len() < needed {
            return Err(ActionError::TooFewCorrespondences {
                found: points3d.len(),
            });
        }
        let enough = |inliers: usize| inliers >= (needed + 2).max(points3d.len() / 4);
        let camera = if calibrated {
            let problem = ResectionProblem {
                points3d: &points3d,
                points2d: &points2d,
                intrinsics: self.images[image].intrinsics.expect("validated"),
            };
            let fit =
                msac(&problem, &config).map_err(|e| ActionError::ResectionFailed(e.to_string()))?;
            if !enough(fit.inlier_count()) {
                return Err(ActionError::ResectionFailed(format!(
                    "{} inliers",
                    fit.inlier_count()
                )));
            }
            Camera::Euclidean(fit.model)
        } else {
            let problem = ProjectiveResectionProblem {
                points3d: &points3d,
                points2d: &points2d,
            };
            let fit =
                msac(&problem, &config).map_err(|e| ActionError::ResectionFailed(e.to_string()))?;
            if !enough(fit.inlier_count()) {
                return Err(ActionError::ResectionFailed(format!(
                    "{} inliers",
                    fit.inlier_count()
                )));
            }
            if model.frame == Frame::Euclidean {
                let cam = euclidean_from_matrix(&fit.model).ok_or_else(|| {
                    ActionError::ResectionFailed("camera matrix does not decompose".into())
                })?;
                let inl = fit.inliers();
                let x3: Vec<_> = inl.iter().map(|&i| points3d[i]).collect();
                let x2: Vec<_> = inl.iter().map(|&i| points2d[i]).collect();
                Camera::Euclidean(refine_pose(&cam, &x3, &x2).unwrap_or(cam))
            } else {
                Camera::Projective(fit.model)
            }
        };
        let mut out = model.clone();
        out.cameras.insert(image, camera);
        self.consolidate(&mut out, Some(&BTreeSet::from([image])));
        let seen = out
            .triangulated()
            .filter(|(_, tp)| tp.observation(image).is_some())
            .count();
        if !self.retained(&out, &[model]) {
            return Err(ActionError::ResectionFailed(
                "the model lost most of its tie-points".into(),
            ));
        }
        if seen < needed {
            return Err(ActionError::ResectionFailed(format!(
                "{seen} tie-points remain in the new camera"
            )));
        }
        let mean = super::Engine::mean_error(&out);
        if mean > self.mean_threshold(&out) {
            return Err(ActionError::ResectionFailed(format!(
                "mean reprojection error {mean:.3} px"
            )));
        }
        Ok(out)
    }

    /// Aligns the smaller model onto the larger with a similarity (both
    /// Euclidean) or a projectivity and joins them.
    pub fn merge_models(&mut self, a: &Model, b: &Model) -> Result<Model, ActionError> {
        let (small, large) = match (a.frame, b.frame) {
            (Frame::Projective, Frame::Euclidean) => (a, b),
            (Frame::Euclidean, Frame::Projective) => (b, a),
            _ if a.cameras.len() < b.cameras.len() => (a, b),
            _ => (b, a),
        };
        let similarity = small.frame == Frame::Euclidean && large.frame == Frame::Euclidean;
        let mut ids = Vec::new();
        let mut common = Common {
            small: Vec::new(),
            large: Vec::new(),
            small_obs: Vec::new(),
            large_obs: Vec::new(),
        };
        for (tid, tp) in small.triangulated() {
            let Some(lt) = large.tie_points.get(&tid).filter(|t| t.is_triangulated()) else {
                continue;
            };
            ids.push(tid);
            common.small.push(tp.position.unwrap());
            common.large.push(lt.position.unwrap());
            common.small_obs.push(
                small
                    .observations_in_model(tp)
                    .map(|o| (&small.cameras[&o.image], o.xy))
                    .collect(),
            );
            common.large_obs.push(
                large
                    .observations_in_model(lt)
                    .map(|o| (&large.cameras[&o.image], o.xy))
                    .collect(),
            );
        }
        let needed = if similarity { 3 } else { 5 };
        if ids.len() < needed {
            return Err(ActionError::TooFewCommonPoints { found: ids.len() });
        }
        let threshold = large
            .cameras
            .keys()
            .chain(small.cameras.keys())
            .map(|&i| self.images[i].diagonal() / self.config.match_divisor)
            .fold(f64::INFINITY, f64::min);
        let problem = AlignProblem {
            common: &common,
            similarity,
        };
        let first = *large.cameras.keys().next().unwrap();
        let stream = (2 * self.images.len() * self.images.len() + first) as u64;
        let mut config = self.msac_config(threshold, first, stream);
        config.bucket_size = 0.0;
        let fit =
            msac(&problem, &config).map_err(|e| ActionError::AlignmentFailed(e.to_string()))?;
        if fit.inlier_count() < needed {
            return Err(ActionError::AlignmentFailed(format!(
                "{} inliers",
                fit.inlier_count()
            )));
        }
        let (t, tinv) = fit.model;
        let mut merged = large.clone();
        for (&id, cam) in &small.cameras {
            let moved = move_camera(cam, &t, &tinv, similarity, large.frame).ok_or_else(|| {
                ActionError::AlignmentFailed(format!("camera {id} does not transform"))
            })?;
            merged.cameras.insert(id, moved);
        }
        for (&tid, tp) in &small.tie_points {
            if merged
                .tie_points
                .get(&tid)
                .is_some_and(|t| t.is_triangulated())
            {
                continue;
            }
            let mut tp = tp.clone();
            tp.position = tp.position.and_then(|x| transform_point(&t, &x));
            if tp.position.is_none() && tp.status == TiePointStatus::Triangulated {
                tp.status = TiePointStatus::Pending;
            }
            merged.tie_points.insert(tid, tp);
        }
        for (k, &tid) in ids.iter().enumerate() {
            if !fit.inlier_mask[k] {
                let tp = merged.tie_points.get_mut(&tid).unwrap();
                tp.position = None;
                tp.status = TiePointStatus::Pending;
            }
        }
        if !similarity {
            cheirality_enforce(&mut merged);
        }
        let small_ids: BTreeSet<ImageId> = small.cameras.keys().copied().collect();
        self.consolidate(&mut merged, Some(&small_ids));
        if !self.retained(&merged, &[small, large]) {
            return Err(ActionError::AlignmentFailed(
                "the merged model lost most of its tie-points".into(),
            ));
        }
        let mean = super::Engine::mean_error(&merged);
        if mean > self.mean_threshold(&merged) {
            return Err(ActionError::AlignmentFailed(format!(
                "mean reprojection error {mean:.3} px"
            )));
        }
        Ok(merged)
    }

    /// In autocalibrated mode, upgrades a projective model. Models with
    /// enough cameras become Euclidean; smaller ones stay projective in the
    /// upgraded frame. Failures leave the model unchanged.
    pub fn maybe_upgrade(&mut self, model: Model) -> Result<Model, ActionError> {
        if self.config.mode == Mode::Calibrated || model.frame == Frame::Euclidean {
            return Ok(model);
        }
        let Ok((mut up, _)) = upgrade(&model, &self.image_sizes(), &self.config.autocal) else {
            return Ok(model);
        };
        if model.cameras.len() < self.config.autocal_min_cameras {
            to_projective(&mut up);
            return Ok(up);
        }
        for cam in up.cameras.values_mut() {
            if let Camera::Euclidean(c) = cam {
                *c = snap_intrinsics(c);
            }
        }
        self.intersect_pending(&mut up);
        self.bundle(&mut up, None);
        self.prune(&mut up);
        if up.triangulated_count() < self.config.min_model_points {
            return Ok(model);
        }
        Ok(up)
    }
}

fn move_camera(
    cam: &Camera,
    t: &Matrix4<f64>,
    tinv: &Matrix4<f64>,
    similarity: bool,
    target: Frame,
) -> Option<Camera> {
    match cam {
        Camera::Euclidean(c) if similarity => {
            let block = t.fixed_view::<3, 3>(0, 0).into_owned();
            let scale = block.determinant().cbrt();
            let rs = block / scale;
            let mut out = c.clone();
            out.rotation = c.rotation * rs.transpose();
            out.center = transform_point(t, &c.center)?;
            Some(Camera::Euclidean(out))
        }
        _ => {
            let p = cam.matrix() * tinv;
            match target {
                Frame::Euclidean => euclidean_from_matrix(&p).map(Camera::Euclidean),
                Frame::Projective => Some(Camera::Projective(p)),
            }
        }
    }
}
