//! Per-camera parameterisations and their analytic Jacobians.

use nalgebra::{Matrix2x3, Rotation3, SMatrix, SVector, Vector2, Vector3};

use crate::geometry::linalg::skew;
use crate::geometry::{Camera, EuclideanCamera};

pub(crate) const POSE_DIM: usize = 6;
pub(crate) const EUCLIDEAN_FULL_DIM: usize = 10;
pub(crate) const PROJECTIVE_DIM: usize = 11;

/// Orthonormal basis (as columns) of the complement of `vec(P)` in R^12,
/// built from a Householder reflection.
pub(crate) fn projective_basis(p: &nalgebra::Matrix3x4<f64>) -> SMatrix<f64, 12, 11> {
    let mut v = SVector::<f64, 12>::zeros();
    for r in 0..3 {
        for c in 0..4 {
            v[r * 4 + c] = p[(r, c)];
        }
    }
    v /= v.norm();
    let k = v.iamax();
    let s = v[k].signum();
    let mut w = v;
    w[k] -= s;
    let ww = w.norm_squared();
    let h = if ww > 1e-300 {
        SMatrix::<f64, 12, 12>::identity() - w * w.transpose() * (2.0 / ww)
    } else {
        SMatrix::<f64, 12, 12>::identity()
    };
    let mut basis = SMatrix::<f64, 12, 11>::zeros();
    let mut col = 0;
    for j in 0..12 {
        if j != k {
            basis.set_column(col, &h.column(j));
            col += 1;
        }
    }
    basis
}

/// Applies a full-size parameter increment to a camera.
pub(crate) fn camera_plus(
    camera: &Camera,
    delta: &[f64],
    basis: Option<&SMatrix<f64, 12, 11>>,
) -> Camera {
    match camera {
        Camera::Euclidean(c) => {
            let mut out: EuclideanCamera = c.clone();
            let w = Vector3::new(delta[0], delta[1], delta[2]);
            out.rotation = Rotation3::new(w).into_inner() * c.rotation;
            out.center = c.center + Vector3::new(delta[3], delta[4], delta[5]);
            if delta.len() >= EUCLIDEAN_FULL_DIM {
                let rho = c.intrinsics.fy / c.intrinsics.fx;
                out.intrinsics.fx = c.intrinsics.fx + delta[6];
                out.intrinsics.fy = rho * out.intrinsics.fx;
                out.intrinsics.cx = c.intrinsics.cx + delta[7];
                out.intrinsics.cy = c.intrinsics.cy + delta[8];
                out.radial = c.radial + delta[9];
            }
            Camera::Euclidean(out)
        }
        Camera::Projective(p) => {
            let b = basis.expect("projective camera needs a basis");
            let d = b * SVector::<f64, 11>::from_column_slice(&delta[..PROJECTIVE_DIM]);
            let mut q = *p;
            for r in 0..3 {
                for c in 0..4 {
                    q[(r, c)] += d[r * 4 + c];
                }
            }
            Camera::Projective(q)
        }
    }
}

/// Residual `project(X) - obs` with the Jacobians with respect to the full
/// camera parameter vector (2 x dim, column-major in a Vec) and the point.
pub(crate) struct Linearized {
    pub residual: Vector2<f64>,
    pub d_camera: Vec<[f64; 2]>,
    pub d_point: Matrix2x3<f64>,
}

pub(crate) fn linearize(
    camera: &Camera,
    dim: usize,
    basis: Option<&SMatrix<f64, 12, 11>>,
    x: &Vector3<f64>,
    obs: &Vector2<f64>,
) -> Option<Linearized> {
    match camera {
        Camera::Euclidean(c) => {
            let xc = c.to_camera(x);
            if xc.z.abs() < 1e-12 {
                return None;
            }
            let k = &c.intrinsics;
            let (u, v) = (xc.x / xc.z, xc.y / xc.z);
            let r2 = u * u + v * v;
            let d = 1.0 + c.radial * r2;
            let px = k.fx * d * u + k.skew * d * v + k.cx;
            let py = k.fy * d * v + k.cy;
            let k1 = c.radial;
            // d(pixel)/d(u, v)
            let a11 = k.fx * (d + 2.0 * k1 * u * u) + k.skew * 2.0 * k1 * u * v;
            let a12 = k.fx * 2.0 * k1 * u * v + k.skew * (d + 2.0 * k1 * v * v);
            let a21 = k.fy * 2.0 * k1 * u * v;
            let a22 = k.fy * (d + 2.0 * k1 * v * v);
            let duv = Matrix2x3::new(
                1.0 / xc.z,
                0.0,
                -xc.x / (xc.z * xc.z),
                0.0,
                1.0 / xc.z,
                -xc.y / (xc.z * xc.z),
            );
            let a = nalgebra::Matrix2::new(a11, a12, a21, a22);
            let d_xc = a * duv;
            let d_point = d_xc * c.rotation;
            let d_rot = d_xc * (-skew(&xc));
            let d_center = -d_point;
            let mut d_camera = Vec::with_capacity(dim);
            for j in 0..3 {
                d_camera.push([d_rot[(0, j)], d_rot[(1, j)]]);
            }
            for j in 0..3 {
                d_camera.push([d_center[(0, j)], d_center[(1, j)]]);
            }
            if dim >= EUCLIDEAN_FULL_DIM {
                let rho = k.fy / k.fx;
                d_camera.push([d * u, rho * d * v]);
                d_camera.push([1.0, 0.0]);
                d_camera.push([0.0, 1.0]);
                d_camera.push([r2 * (k.fx * u + k.skew * v), r2 * k.fy * v]);
            }
            Some(Linearized {
                residual: Vector2::new(px - obs.x, py - obs.y),
                d_camera,
                d_point,
            })
        }
        Camera::Projective(p) => {
            let xh = x.push(1.0);
            let h = p * xh;
            if h.z.abs() < 1e-12 {
                return None;
            }
            let (px, py) = (h.x / h.z, h.y / h.z);
            // d(pixel)/d(vec P), row-major.
            let mut dp = [[0.0; 2]; 12];
            for j in 0..4 {
                dp[j][0] = xh[j] / h.z;
                dp[4 + j][1] = xh[j] / h.z;
                dp[8 + j][0] = -px * xh[j] / h.z;
                dp[8 + j][1] = -py * xh[j] / h.z;
            }
            let b = basis.expect("projective camera needs a basis");
            let mut d_camera = Vec::with_capacity(PROJECTIVE_DIM);
            for k in 0..PROJECTIVE_DIM {
                let mut col = [0.0; 2];
                for (e, row) in dp.iter().enumerate() {
                    col[0] += row[0] * b[(e, k)];
                    col[1] += row[1] * b[(e, k)];
                }
                d_camera.push(col);
            }
            let mut d_point = Matrix2x3::zeros();
            for j in 0..3 {
                d_point[(0, j)] = (p[(0, j)] - px * p[(2, j)]) / h.z;
                d_point[(1, j)] = (p[(1, j)] - py * p[(2, j)]) / h.z;
            }
            Some(Linearized {
                residual: Vector2::new(px - obs.x, py - obs.y),
                d_camera,
                d_point,
            })
        }
    }
}
