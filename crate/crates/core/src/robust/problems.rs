//! MSAC adapters for the geometric solvers.

use nalgebra::{DVector, Matrix3, Matrix3x4, Vector2, Vector3};

use super::MsacProblem;
use crate::geometry::{
    fundamental_sampson, homography_sampson, refine_projective_camera, resect_calibrated,
    resect_projective_dlt, solve_fundamental, solve_fundamental_7pt, solve_homography,
    symmetric_transfer_error, Camera, EuclideanCamera, Intrinsics,
};
use crate::optim::{minimize, LmOptions};

fn gather<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

fn rank2(f: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = f.svd(true, true);
    let mut s = svd.singular_values;
    s[2] = 0.0;
    let m = svd.u.unwrap() * Matrix3::from_diagonal(&s) * svd.v_t.unwrap();
    m / m.norm()
}

/// Minimises a per-pair first-order geometric error over the nine matrix
/// entries (largest one fixed); `project` maps a raw matrix onto the model
/// manifold before evaluation.
fn refine_matrix<E, Pj>(
    m0: &Matrix3<f64>,
    a: &[Vector2<f64>],
    b: &[Vector2<f64>],
    idx: &[usize],
    err: E,
    project: Pj,
) -> Option<Matrix3<f64>>
where
    E: Fn(&Matrix3<f64>, &Vector2<f64>, &Vector2<f64>) -> f64,
    Pj: Fn(&Matrix3<f64>) -> Matrix3<f64>,
{
    let m0 = m0 / m0.norm();
    let (fr, fc) = m0.iamax_full();
    let fixed = fr * 3 + fc;
    let free: Vec<usize> = (0..9).filter(|&k| k != fixed).collect();
    let build = |x: &DVector<f64>| {
        let mut m = m0;
        for (slot, &k) in free.iter().enumerate() {
            m[(k / 3, k % 3)] += x[slot];
        }
        project(&m)
    };
    let residual = |x: &DVector<f64>| {
        let m = build(x);
        let r = DVector::from_iterator(idx.len(), idx.iter().map(|&i| err(&m, &a[i], &b[i])));
        r.iter().all(|v| v.is_finite()).then_some(r)
    };
    let options = LmOptions {
        max_iterations: 20,
        ..LmOptions::default()
    };
    let out = minimize(residual, DVector::zeros(8), options)?;
    Some(build(&out.params))
}

/// Fundamental matrix from point pairs (`b^T F a = 0`).
pub struct FundamentalProblem<'a> {
    pub a: &'a [Vector2<f64>],
    pub b: &'a [Vector2<f64>],
}

impl MsacProblem for FundamentalProblem<'_> {
    type Model = Matrix3<f64>;

    fn len(&self) -> usize {
        self.a.len()
    }

    fn sample_size(&self) -> usize {
        7
    }

    fn fit_minimal(&self, sample: &[usize]) -> Vec<Matrix3<f64>> {
        solve_fundamental_7pt(&gather(self.a, sample), &gather(self.b, sample)).unwrap_or_default()
    }

    fn fit_refined(&self, inliers: &[usize], initial: &Matrix3<f64>) -> Option<Matrix3<f64>> {
        let linear = solve_fundamental(&gather(self.a, inliers), &gather(self.b, inliers))
            .unwrap_or_else(|_| rank2(initial));
        refine_matrix(&linear, self.a, self.b, inliers, fundamental_sampson, rank2)
    }

    fn residual(&self, f: &Matrix3<f64>, i: usize) -> f64 {
        fundamental_sampson(f, &self.a[i], &self.b[i])
    }

    fn location(&self, i: usize) -> Option<Vector2<f64>> {
        Some(self.a[i])
    }
}

/// Homography from point pairs (`b ~ H a`); MSAC scores the symmetric
/// transfer error, the refit minimises the first-order geometric error.
pub struct HomographyProblem<'a> {
    pub a: &'a [Vector2<f64>],
    pub b: &'a [Vector2<f64>],
}

impl MsacProblem for HomographyProblem<'_> {
    type Model = Matrix3<f64>;

    fn len(&self) -> usize {
        self.a.len()
    }

    fn sample_size(&self) -> usize {
        4
    }

    fn fit_minimal(&self, sample: &[usize]) -> Vec<Matrix3<f64>> {
        solve_homography(&gather(self.a, sample), &gather(self.b, sample))
            .map(|h| vec![h])
            .unwrap_or_default()
    }

    fn fit_refined(&self, inliers: &[usize], initial: &Matrix3<f64>) -> Option<Matrix3<f64>> {
        let linear = solve_homography(&gather(self.a, inliers), &gather(self.b, inliers))
            .unwrap_or(*initial);
        refine_matrix(&linear, self.a, self.b, inliers, homography_sampson, |m| {
            m / m.norm()
        })
    }

    fn residual(&self, h: &Matrix3<f64>, i: usize) -> f64 {
        symmetric_transfer_error(h, &self.a[i], &self.b[i])
    }

    fn location(&self, i: usize) -> Option<Vector2<f64>> {
        Some(self.a[i])
    }
}

fn reprojection(camera: &Camera, x: &Vector3<f64>, obs: &Vector2<f64>) -> f64 {
    if camera.depth(x) <= 0.0 {
        return f64::INFINITY;
    }
    camera
        .project(x)
        .map(|p| (p - obs).norm())
        .unwrap_or(f64::INFINITY)
}

/// Calibrated resection from 3D-2D correspondences; four-point samples.
pub struct ResectionProblem<'a> {
    pub points3d: &'a [Vector3<f64>],
    pub points2d: &'a [Vector2<f64>],
    pub intrinsics: Intrinsics,
}

impl MsacProblem for ResectionProblem<'_> {
    type Model = EuclideanCamera;

    fn len(&self) -> usize {
        self.points3d.len()
    }

    fn sample_size(&self) -> usize {
        4
    }

    fn fit_minimal(&self, sample: &[usize]) -> Vec<EuclideanCamera> {
        resect_calibrated(
            &gather(self.points3d, sample),
            &gather(self.points2d, sample),
            &self.intrinsics,
        )
        .map(|c| vec![c])
        .unwrap_or_default()
    }

    fn fit_refined(&self, inliers: &[usize], initial: &EuclideanCamera) -> Option<EuclideanCamera> {
        crate::geometry::refine_pose(
            initial,
            &gather(self.points3d, inliers),
            &gather(self.points2d, inliers),
        )
    }

    fn residual(&self, cam: &EuclideanCamera, i: usize) -> f64 {
        reprojection(
            &Camera::Euclidean(cam.clone()),
            &self.points3d[i],
            &self.points2d[i],
        )
    }

    fn location(&self, i: usize) -> Option<Vector2<f64>> {
        Some(self.points2d[i])
    }
}

/// Uncalibrated DLT resection; six-point samples.
pub struct ProjectiveResectionProblem<'a> {
    pub points3d: &'a [Vector3<f64>],
    pub points2d: &'a [Vector2<f64>],
}

impl MsacProblem for ProjectiveResectionProblem<'_> {
    type Model = Matrix3x4<f64>;

    fn len(&self) -> usize {
        self.points3d.len()
    }

    fn sample_size(&self) -> usize {
        6
    }

    fn fit_minimal(&self, sample: &[usize]) -> Vec<Matrix3x4<f64>> {
        resect_projective_dlt(
            &gather(self.points3d, sample),
            &gather(self.points2d, sample),
        )
        .map(|p| vec![p])
        .unwrap_or_default()
    }

    fn fit_refined(&self, inliers: &[usize], initial: &Matrix3x4<f64>) -> Option<Matrix3x4<f64>> {
        let p3 = gather(self.points3d, inliers);
        let p2 = gather(self.points2d, inliers);
        let linear = resect_projective_dlt(&p3, &p2).unwrap_or(*initial);
        refine_projective_camera(&linear, &p3, &p2)
    }

    fn residual(&self, p: &Matrix3x4<f64>, i: usize) -> f64 {
        // Projective depth has no sign meaning before the upgrade.
        let h = p * self.points3d[i].push(1.0);
        if h.z.abs() < 1e-12 {
            return f64::INFINITY;
        }
        (h.xy() / h.z - self.points2d[i]).norm()
    }

    fn location(&self, i: usize) -> Option<Vector2<f64>> {
        Some(self.points2d[i])
    }
}
