use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Rotation3, Vector2, Vector3};

use super::linalg::{
    collinearity_ratio, condition_2d, condition_3d, coplanarity_ratio, null_space,
};
use super::{EuclideanCamera, GeometryError, Intrinsics};
use crate::optim::{minimize, LmOptions};

const PPNP_MAX_ITERATIONS: usize = 5000;

/// Procrustean PnP: alternates an orthogonal Procrustes problem for the
/// rotation with a closed-form update of the depths and the centre.
/// Returns the world-to-camera rotation and the camera centre.
pub fn ppnp(
    rays: &[Vector3<f64>],
    points: &[Vector3<f64>],
    tolerance: f64,
) -> Result<(Matrix3<f64>, Vector3<f64>), GeometryError> {
    let n = rays.len();
    if n != points.len() || n < 3 {
        return Err(GeometryError::InsufficientPoints {
            needed: 3,
            got: n.min(points.len()),
        });
    }
    let p = DMatrix::from_fn(n, 3, |i, j| rays[i][j]);
    let s = DMatrix::from_fn(n, 3, |i, j| points[i][j]);
    let s_mean = s.row_mean();
    let s_centered = DMatrix::from_fn(n, 3, |i, j| s[(i, j)] - s_mean[j]);
    let ray_sq: Vec<f64> = rays.iter().map(|r| r.norm_squared()).collect();
    let scale = s_centered.norm().max(1e-300);
    let mut z = vec![0.0; n];
    let mut e_old = DMatrix::from_element(n, 3, f64::INFINITY);
    let mut rotation = Matrix3::identity();
    let mut center = Vector3::zeros();
    for _ in 0..PPNP_MAX_ITERATIONS {
        // M = P^T Z (S - mean S)
        let mut m = Matrix3::zeros();
        for i in 0..n {
            for a in 0..3 {
                for b in 0..3 {
                    m[(a, b)] += p[(i, a)] * z[i] * s_centered[(i, b)];
                }
            }
        }
        let svd = nalgebra::SVD::new(m, true, true);
        let u: Matrix3<f64> = svd.u.unwrap();
        let vt: Matrix3<f64> = svd.v_t.unwrap();
        let d = (u * vt).determinant().signum();
        let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
        let pr = &p * r;
        let mut c = Vector3::zeros();
        for i in 0..n {
            for j in 0..3 {
                c[j] += (s[(i, j)] - z[i] * pr[(i, j)]) / n as f64;
            }
        }
        let mut e = DMatrix::zeros(n, 3);
        for i in 0..n {
            let y = Vector3::new(s[(i, 0)] - c.x, s[(i, 1)] - c.y, s[(i, 2)] - c.z);
            let pri = Vector3::new(pr[(i, 0)], pr[(i, 1)], pr[(i, 2)]);
            z[i] = (pri.dot(&y) / ray_sq[i]).max(0.0);
            for j in 0..3 {
                e[(i, j)] = y[j] - z[i] * pri[j];
            }
        }
        // S = Z P R + 1 c^T, so the camera frame is R (X - c).
        rotation = r;
        center = c;
        let err = (&e - &e_old).norm();
        e_old = e;
        if err < tolerance * scale {
            return finite_pose(rotation, center);
        }
    }
    finite_pose(rotation, center).and(Err(GeometryError::Divergence))
}

fn finite_pose(
    r: Matrix3<f64>,
    c: Vector3<f64>,
) -> Result<(Matrix3<f64>, Vector3<f64>), GeometryError> {
    if r.iter().chain(c.iter()).all(|v| v.is_finite()) {
        Ok((r, c))
    } else {
        Err(GeometryError::Divergence)
    }
}

/// Calibrated resection: PPnP initialisation followed by reprojection-error
/// refinement of the six external parameters.
pub fn resect_calibrated(
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    intrinsics: &Intrinsics,
) -> Result<EuclideanCamera, GeometryError> {
    if points3d.len() != points2d.len() || points3d.len() < 3 {
        return Err(GeometryError::InsufficientPoints {
            needed: 3,
            got: points3d.len().min(points2d.len()),
        });
    }
    if collinearity_ratio(points3d) < 1e-6 {
        return Err(GeometryError::Degenerate("collinear 3D points".into()));
    }
    let kinv = intrinsics
        .matrix()
        .try_inverse()
        .ok_or(GeometryError::InvalidIntrinsics)?;
    let rays: Vec<Vector3<f64>> = points2d.iter().map(|x| kinv * x.push(1.0)).collect();
    let (r, c) = ppnp(&rays, points3d, 1e-9)?;
    let cam = EuclideanCamera::new(*intrinsics, r, c);
    Ok(refine_pose(&cam, points3d, points2d).unwrap_or(cam))
}

/// Minimises reprojection error over rotation (local increments) and centre.
pub fn refine_pose(
    camera: &EuclideanCamera,
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
) -> Option<EuclideanCamera> {
    let base = camera.clone();
    let build = |x: &DVector<f64>| {
        let mut c = base.clone();
        let w = Vector3::new(x[0], x[1], x[2]);
        c.rotation = Rotation3::new(w).into_inner() * base.rotation;
        c.center = base.center + Vector3::new(x[3], x[4], x[5]);
        c
    };
    let residual = |x: &DVector<f64>| {
        let c = super::Camera::Euclidean(build(x));
        let mut r = DVector::zeros(2 * points3d.len());
        for (i, (p, obs)) in points3d.iter().zip(points2d).enumerate() {
            let q = c.project(p).ok()?;
            r[2 * i] = q.x - obs.x;
            r[2 * i + 1] = q.y - obs.y;
        }
        Some(r)
    };
    let out = minimize(residual, DVector::zeros(6), LmOptions::default())?;
    Some(build(&out.params))
}

/// Direct linear transform for an uncalibrated 3x4 camera (at least six
/// points, not all coplanar), normalised to unit Frobenius norm.
pub fn resect_projective_dlt(
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
) -> Result<Matrix3x4<f64>, GeometryError> {
    let n = points3d.len();
    if n != points2d.len() || n < 6 {
        return Err(GeometryError::InsufficientPoints {
            needed: 6,
            got: n.min(points2d.len()),
        });
    }
    if coplanarity_ratio(points3d) < 1e-9 {
        return Err(GeometryError::Degenerate("coplanar 3D points".into()));
    }
    let (x3, t3) = condition_3d(points3d);
    let (x2, t2) = condition_2d(points2d);
    let mut a = DMatrix::zeros(2 * n, 12);
    for i in 0..n {
        let xh = x3[i].push(1.0);
        let (u, v) = (x2[i].x, x2[i].y);
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -u * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -v * xh[j];
        }
    }
    let (sol, sv) = null_space(&a);
    if sv[10] < 1e-10 * sv[0] {
        return Err(GeometryError::Degenerate(
            "DLT null space has dimension above one".into(),
        ));
    }
    let pn = Matrix3x4::from_row_slice(sol.as_slice());
    let t2inv = t2
        .try_inverse()
        .ok_or(GeometryError::Degenerate("conditioning".into()))?;
    let p = t2inv * pn * t3;
    Ok(p / p.norm())
}

/// Reprojection-error refinement of a 3x4 camera. The entry of largest
/// magnitude is held fixed to remove the scale freedom.
pub fn refine_projective_camera(
    p: &Matrix3x4<f64>,
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
) -> Option<Matrix3x4<f64>> {
    let fixed = p.iamax_full();
    let fixed = fixed.0 * 4 + fixed.1;
    let free: Vec<usize> = (0..12).filter(|&k| k != fixed).collect();
    let base = *p;
    let build = |x: &DVector<f64>| {
        let mut m = base;
        for (slot, &k) in free.iter().enumerate() {
            m[(k / 4, k % 4)] = base[(k / 4, k % 4)] + x[slot];
        }
        m
    };
    let residual = |x: &DVector<f64>| {
        let m = build(x);
        let mut r = DVector::zeros(2 * points3d.len());
        for (i, (pt, obs)) in points3d.iter().zip(points2d).enumerate() {
            let h = m * pt.push(1.0);
            if h.z.abs() < 1e-12 {
                return None;
            }
            r[2 * i] = h.x / h.z - obs.x;
            r[2 * i + 1] = h.y / h.z - obs.y;
        }
        Some(r)
    };
    let out = minimize(residual, DVector::zeros(11), LmOptions::default())?;
    let m = build(&out.params);
    Some(m / m.norm())
}
