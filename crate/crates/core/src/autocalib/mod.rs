//! Euclidean upgrade of projective models: closed-form plane at infinity
//! for a pair of assumed calibrations, a grid search over the two focal
//! lengths and a nonlinear refinement of the winning sample.

use std::collections::BTreeMap;

use nalgebra::{DVector, Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use thiserror::Error;

use crate::geometry::linalg::rq3;
use crate::geometry::{
    cheirality_enforce, projective_center, Camera, EuclideanCamera, Frame, ImageId, Model,
    TiePointStatus,
};
use crate::optim::{minimize, LmOptions};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutocalibError {
    #[error("second camera shares the first camera's centre: no finite plane at infinity")]
    ZeroEpipole,
    #[error("every grid sample produced a degenerate upgrade")]
    SearchFailed,
    #[error("refined focal {0:.4} left the normalized range [1/3, 3]")]
    OutsideLegalRange(f64),
    #[error("refinement did not converge")]
    NoConvergence,
    #[error("need at least two cameras, got {0}")]
    TooFewCameras(usize),
    #[error("no image size for camera {0}")]
    MissingImageSize(ImageId),
    #[error("upgraded camera {0} cannot be decomposed")]
    BadCamera(ImageId),
}

pub const FOCAL_RANGE: (f64, f64) = (1.0 / 3.0, 3.0);
pub const DEFAULT_GRID_SIZE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub skew: f64,
    pub aspect: f64,
    pub u0: f64,
    pub v0: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            skew: 100.0,
            aspect: 10.0,
            u0: 1.0,
            v0: 1.0,
        }
    }
}

/// `H = [K1 0; r^T lambda]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpgradeCollineation {
    pub k1: Matrix3<f64>,
    pub r: Vector3<f64>,
    pub lambda: f64,
}

impl UpgradeCollineation {
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut h = Matrix4::zeros();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.k1);
        h.fixed_view_mut::<1, 3>(3, 0)
            .copy_from(&self.r.transpose());
        h[(3, 3)] = self.lambda;
        h
    }
}

/// Maps normalized image coordinates to pixels.
pub fn viewport(w: f64, h: f64) -> Matrix3<f64> {
    let d = (w * w + h * h).sqrt();
    Matrix3::new(d, 0.0, w, 0.0, d, h, 0.0, 0.0, 2.0) * 0.5
}

/// Weighted deviation of normalized intrinsics from zero skew, unit aspect
/// ratio and a centred principal point.
pub fn calibration_cost(k: &Matrix3<f64>, w: &CostWeights) -> f64 {
    w.skew * k[(0, 1)].abs()
        + w.aspect * (k[(0, 0)] - k[(1, 1)]).abs()
        + w.u0 * k[(0, 2)].abs()
        + w.v0 * k[(1, 2)].abs()
}

/// Whether `k` cameras with `known` known and `constant` constant internal
/// parameters satisfy the autocalibration counting argument.
pub fn counting_feasible(k: usize, known: usize, constant: usize) -> bool {
    let (k, pk, pc) = (k as i64, known as i64, constant as i64);
    5 * k - 8 >= (k - 1) * (5 - pk - pc) + 5 - pk
}

/// `n` log-spaced normalized focal values covering the legal range.
pub fn focal_grid(n: usize) -> Vec<f64> {
    let (lo, hi) = (FOCAL_RANGE.0.ln(), FOCAL_RANGE.1.ln());
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Rotation taking `t` onto the positive x-axis: a Householder reflection
/// followed by a flip of the z-axis.
fn align_to_x(t: &Vector3<f64>) -> Matrix3<f64> {
    let u = t.normalize();
    let v = u - Vector3::x();
    let vv = v.norm_squared();
    let house = if vv < 1e-24 {
        return Matrix3::identity();
    } else {
        Matrix3::identity() - v * v.transpose() * (2.0 / vv)
    };
    Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) * house
}

/// Plane-at-infinity parameter `r` for `P1 = [I | 0]` and `p2 = [A2 | e2]`
/// given the two calibrations.
pub fn plane_at_infinity(
    p2: &Matrix3x4<f64>,
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
) -> Result<Vector3<f64>, AutocalibError> {
    let e2: Vector3<f64> = p2.column(3).into_owned();
    if e2.norm() < 1e-12 {
        return Err(AutocalibError::ZeroEpipole);
    }
    let k2inv = k2.try_inverse().ok_or(AutocalibError::SearchFailed)?;
    let t2 = k2inv * e2;
    let rstar = align_to_x(&t2);
    let a2: Matrix3<f64> = p2.fixed_view::<3, 3>(0, 0).into_owned();
    let w = rstar * k2inv * a2 * k1;
    let (w1, w2, w3) = (
        w.row(0).transpose(),
        w.row(1).transpose(),
        w.row(2).transpose(),
    );
    Ok((w2.cross(&w3) / w3.norm() - w1) / t2.norm())
}

/// Normalized intrinsics of a camera matrix, `k33 = 1`.
pub fn extract_intrinsics(p: &Matrix3x4<f64>) -> Option<Matrix3<f64>> {
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let det = m.determinant();
    if !det.is_finite() || det.abs() < 1e-300 {
        return None;
    }
    if det < 0.0 {
        m = -m;
    }
    let (k, _) = rq3(&m);
    (k[(2, 2)].abs() > 1e-300).then(|| k / k[(2, 2)])
}

/// Cameras normalized by their viewports and moved to the frame where the
/// reference camera is `[I | 0]`.
#[derive(Debug, Clone)]
pub struct NormalizedFrame {
    pub ids: Vec<ImageId>,
    /// Same order as `ids`; index 0 is the reference camera, index 1 the
    /// second camera of the plane-at-infinity solve.
    pub cameras: Vec<Matrix3x4<f64>>,
    pub viewports: Vec<Matrix3<f64>>,
    /// Point transform into this frame.
    pub point_transform: Matrix4<f64>,
}

fn shared_points(model: &Model, a: ImageId, b: ImageId) -> Vec<Vector3<f64>> {
    model
        .triangulated()
        .filter(|(_, tp)| tp.observation(a).is_some() && tp.observation(b).is_some())
        .filter_map(|(_, tp)| tp.position)
        .collect()
}

fn unit_depth_scale(p: &Matrix3x4<f64>) -> Matrix3x4<f64> {
    let n = p.fixed_view::<1, 3>(2, 0).norm();
    p / n
}

impl NormalizedFrame {
    /// The reference camera is the lowest id; the second camera is the one
    /// sharing the most triangulated points with it. The second camera's
    /// sign is set so that shared points lie in front of both cameras.
    pub fn new(
        model: &Model,
        sizes: &BTreeMap<ImageId, (f64, f64)>,
    ) -> Result<Self, AutocalibError> {
        let all: Vec<ImageId> = model.cameras.keys().copied().collect();
        if all.len() < 2 {
            return Err(AutocalibError::TooFewCameras(all.len()));
        }
        let first = all[0];
        let second = *all[1..]
            .iter()
            .max_by_key(|&&id| (shared_points(model, first, id).len(), std::cmp::Reverse(id)))
            .unwrap();
        let mut ids = vec![first, second];
        ids.extend(all.iter().filter(|&&id| id != first && id != second));
        let mut viewports = Vec::new();
        let mut cameras = Vec::new();
        for &id in &ids {
            let &(w, h) = sizes.get(&id).ok_or(AutocalibError::MissingImageSize(id))?;
            let v = viewport(w, h);
            let vinv = v.try_inverse().unwrap();
            cameras.push(unit_depth_scale(&(vinv * model.cameras[&id].matrix())));
            viewports.push(v);
        }
        let c = projective_center(&cameras[0]).normalize();
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 4>(0, 0).copy_from(&cameras[0]);
        m.fixed_view_mut::<1, 4>(3, 0).copy_from(&c.transpose());
        let minv = m.try_inverse().ok_or(AutocalibError::SearchFailed)?;
        for p in cameras.iter_mut() {
            *p = unit_depth_scale(&(*p * minv));
        }
        let mut vote = 0i64;
        for x in shared_points(model, first, second) {
            let xp = m * x.push(1.0);
            let s = xp.z * (cameras[1] * xp).z;
            vote += if s > 0.0 {
                1
            } else if s < 0.0 {
                -1
            } else {
                0
            };
        }
        if vote < 0 {
            cameras[1] = -cameras[1];
        }
        Ok(Self {
            ids,
            cameras,
            viewports,
            point_transform: m,
        })
    }

    /// Upgrade collineation for the given reference and second calibrations.
    pub fn collineation(
        &self,
        k1: &Matrix3<f64>,
        k2: &Matrix3<f64>,
    ) -> Result<UpgradeCollineation, AutocalibError> {
        let r = plane_at_infinity(&self.cameras[1], k1, k2)?;
        Ok(UpgradeCollineation {
            k1: *k1,
            r,
            lambda: 1.0,
        })
    }

    /// Per-camera costs of all cameras but the reference after upgrading.
    pub fn costs(&self, h: &UpgradeCollineation, w: &CostWeights) -> Option<Vec<f64>> {
        let hm = h.matrix();
        self.cameras[1..]
            .iter()
            .map(|p| extract_intrinsics(&(p * hm)).map(|k| calibration_cost(&k, w)))
            .collect()
    }
}

fn diag_k(f: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(f, f, 1.0))
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub f1: f64,
    pub f2: f64,
    pub r: Vector3<f64>,
    pub cost: f64,
    /// `profile[i][j]` is the aggregated cost at `(grid[i], grid[j])`;
    /// infinite for degenerate samples.
    pub profile: Vec<Vec<f64>>,
}

/// Exhaustive search over pairs of normalized focal lengths with centred
/// principal points. Ties keep the lexicographically smallest pair.
pub fn grid_search(
    frame: &NormalizedFrame,
    weights: &CostWeights,
    grid: &[f64],
) -> Result<GridResult, AutocalibError> {
    let mut best: Option<(f64, usize, usize, Vector3<f64>)> = None;
    let mut profile = vec![vec![f64::INFINITY; grid.len()]; grid.len()];
    for (i, &f1) in grid.iter().enumerate() {
        for (j, &f2) in grid.iter().enumerate() {
            let h = frame.collineation(&diag_k(f1), &diag_k(f2))?;
            let Some(costs) = frame.costs(&h, weights) else {
                continue;
            };
            let total: f64 = costs.iter().map(|c| c * c).sum();
            if !total.is_finite() {
                continue;
            }
            profile[i][j] = total;
            if best.as_ref().is_none_or(|b| total < b.0) {
                best = Some((total, i, j, h.r));
            }
        }
    }
    let (cost, i, j, r) = best.ok_or(AutocalibError::SearchFailed)?;
    Ok(GridResult {
        f1: grid[i],
        f2: grid[j],
        r,
        cost,
        profile,
    })
}

fn k_from(f: f64, u: f64, v: f64) -> Matrix3<f64> {
    Matrix3::new(f, 0.0, u, 0.0, f, v, 0.0, 0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct Refined {
    pub collineation: UpgradeCollineation,
    pub f1: f64,
    pub f2: f64,
    pub cost: f64,
}

/// The four weighted terms of the calibration cost, signed.
fn cost_terms(k: &Matrix3<f64>, w: &CostWeights) -> [f64; 4] {
    [
        w.skew * k[(0, 1)],
        w.aspect * (k[(0, 0)] - k[(1, 1)]),
        w.u0 * k[(0, 2)],
        w.v0 * k[(1, 2)],
    ]
}

/// Local minimisation over both focal lengths and principal points, with
/// `r` re-derived at every evaluation. The residuals are the signed cost
/// terms of every upgraded camera, which share the zero set of the
/// aggregated cost but are smooth.
pub fn refine(
    frame: &NormalizedFrame,
    weights: &CostWeights,
    f1: f64,
    f2: f64,
) -> Result<Refined, AutocalibError> {
    let eval = |x: &DVector<f64>| -> Option<DVector<f64>> {
        let h = frame
            .collineation(&k_from(x[0], x[2], x[3]), &k_from(x[1], x[4], x[5]))
            .ok()?;
        let hm = h.matrix();
        let mut r = Vec::with_capacity(4 * frame.cameras.len());
        for p in &frame.cameras[1..] {
            r.extend(cost_terms(&extract_intrinsics(&(p * hm))?, weights));
        }
        Some(DVector::from_vec(r))
    };
    let x0 = DVector::from_vec(vec![f1, f2, 0.0, 0.0, 0.0, 0.0]);
    let out = minimize(
        eval,
        x0,
        LmOptions {
            max_iterations: 100,
            ..LmOptions::default()
        },
    )
    .ok_or(AutocalibError::NoConvergence)?;
    let x = &out.params;
    for f in [x[0], x[1]] {
        if !(FOCAL_RANGE.0..=FOCAL_RANGE.1).contains(&f) {
            return Err(AutocalibError::OutsideLegalRange(f));
        }
    }
    let collineation = frame.collineation(&k_from(x[0], x[2], x[3]), &k_from(x[1], x[4], x[5]))?;
    let cost = frame
        .costs(&collineation, weights)
        .ok_or(AutocalibError::NoConvergence)?
        .iter()
        .map(|c| c * c)
        .sum();
    Ok(Refined {
        collineation,
        f1: x[0],
        f2: x[1],
        cost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutocalibConfig {
    pub weights: CostWeights,
    pub grid_size: usize,
}

impl Default for AutocalibConfig {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            grid_size: DEFAULT_GRID_SIZE,
        }
    }
}

/// Applies `H` in the normalized frame: cameras become `V P H`, points
/// `H^-1 M X`. Points mapped to infinity become pending. Cheirality is
/// enforced on the result.
pub fn apply_upgrade(
    model: &Model,
    frame: &NormalizedFrame,
    h: &UpgradeCollineation,
) -> Result<Model, AutocalibError> {
    let hm = h.matrix();
    let hinv = hm.try_inverse().ok_or(AutocalibError::SearchFailed)?;
    let mut out = Model::new(Frame::Euclidean);
    for ((&id, p), v) in frame.ids.iter().zip(&frame.cameras).zip(&frame.viewports) {
        let pe = v * p * hm;
        let cam = EuclideanCamera::from_matrix(&pe).map_err(|_| AutocalibError::BadCamera(id))?;
        out.cameras.insert(id, Camera::Euclidean(cam));
    }
    let t = hinv * frame.point_transform;
    for (&tid, tp) in &model.tie_points {
        let mut tp = tp.clone();
        if let Some(x) = tp.position {
            let xe: Vector4<f64> = t * x.push(1.0);
            if xe.w.abs() > 1e-12 * xe.norm() {
                tp.position = Some(xe.xyz() / xe.w);
            } else {
                tp.position = None;
                tp.status = TiePointStatus::Pending;
            }
        }
        out.tie_points.insert(tid, tp);
    }
    cheirality_enforce(&mut out);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct UpgradeReport {
    pub grid: GridResult,
    pub refined: Refined,
    /// Mean focal length in pixels per camera after the upgrade.
    pub focals: BTreeMap<ImageId, f64>,
}

/// Normalize, grid search, refine, upgrade. The returned model is Euclidean
/// in frame and camera kind.
pub fn upgrade(
    model: &Model,
    sizes: &BTreeMap<ImageId, (f64, f64)>,
    config: &AutocalibConfig,
) -> Result<(Model, UpgradeReport), AutocalibError> {
    let frame = NormalizedFrame::new(model, sizes)?;
    let grid = grid_search(&frame, &config.weights, &focal_grid(config.grid_size))?;
    let refined = refine(&frame, &config.weights, grid.f1, grid.f2)?;
    let out = apply_upgrade(model, &frame, &refined.collineation)?;
    let focals = out
        .cameras
        .iter()
        .map(|(&id, c)| (id, c.as_euclidean().unwrap().intrinsics.focal()))
        .collect();
    Ok((
        out,
        UpgradeReport {
            grid,
            refined,
            focals,
        },
    ))
}

/// Upgrade from guessed pixel focal lengths of the reference and second
/// cameras, without search.
pub fn upgrade_with_focals(
    model: &Model,
    sizes: &BTreeMap<ImageId, (f64, f64)>,
    focal_px: impl Fn(ImageId) -> f64,
) -> Result<Model, AutocalibError> {
    let frame = NormalizedFrame::new(model, sizes)?;
    let norm = |k: usize| {
        let v = &frame.viewports[k];
        focal_px(frame.ids[k]) / v[(0, 0)]
    };
    let h = frame.collineation(&diag_k(norm(0)), &diag_k(norm(1)))?;
    apply_upgrade(model, &frame, &h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn viewport_examples() {
        let v = viewport(640.0, 480.0);
        let want = Matrix3::new(400.0, 0.0, 320.0, 0.0, 400.0, 240.0, 0.0, 0.0, 1.0);
        assert!((v - want).norm() < 1e-12);
        let v = viewport(2.0, 2.0);
        let s = 2f64.sqrt();
        assert!((v - Matrix3::new(s, 0.0, 1.0, 0.0, s, 1.0, 0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn cost_examples() {
        let unit = CostWeights {
            skew: 1.0,
            aspect: 1.0,
            u0: 1.0,
            v0: 1.0,
        };
        assert_eq!(calibration_cost(&Matrix3::identity(), &unit), 0.0);
        let mut k = Matrix3::identity();
        k[(0, 1)] = 0.1;
        assert!((calibration_cost(&k, &unit) - 0.1).abs() < 1e-15);
        let double = CostWeights {
            skew: 2.0,
            aspect: 2.0,
            u0: 2.0,
            v0: 2.0,
        };
        k[(0, 2)] = 0.3;
        assert!((calibration_cost(&k, &double) - 2.0 * calibration_cost(&k, &unit)).abs() < 1e-15);
    }

    #[test]
    fn counting_argument() {
        assert!(counting_feasible(4, 2, 0));
        assert!(!counting_feasible(3, 2, 0));
        assert!(counting_feasible(2, 5, 0));
        assert!(!counting_feasible(2, 0, 0));
    }

    #[test]
    fn euclidean_pair_needs_no_plane_move() {
        let k2 = Matrix3::new(1.3, 0.0, 0.1, 0.0, 1.2, -0.05, 0.0, 0.0, 1.0);
        let r2 = nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner();
        let t2 = Vector3::new(0.5, 0.1, -0.2);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r2);
        rt.set_column(3, &t2);
        let r = plane_at_infinity(&(k2 * rt), &Matrix3::identity(), &k2).unwrap();
        assert!(r.norm() < 1e-9);
    }

    #[test]
    fn zero_epipole() {
        let p = Matrix3x4::identity();
        assert_eq!(
            plane_at_infinity(&p, &Matrix3::identity(), &Matrix3::identity()).unwrap_err(),
            AutocalibError::ZeroEpipole
        );
    }

    #[test]
    fn alignment_rotation() {
        for t in [
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::x(),
        ] {
            let r = align_to_x(&t);
            assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!((r * t - Vector3::x() * t.norm()).norm() < 1e-12);
        }
    }

    #[test]
    fn grid_is_log_spaced() {
        let g = focal_grid(30);
        assert_eq!(g.len(), 30);
        assert!((g[0] - 1.0 / 3.0).abs() < 1e-12 && (g[29] - 3.0).abs() < 1e-12);
        let ratio = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-9));
    }
}
