use nalgebra::{DMatrix, DVector, Matrix3x4, Vector2, Vector3};

use super::{Camera, GeometryError};

pub const TRIANGULATION_MAX_ITERATIONS: usize = 10;
const WEIGHT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    /// Condition number of the final (row-equilibrated) linear system.
    pub condition: f64,
    pub max_reprojection_error: f64,
}

/// Removes the one-coefficient radial distortion from a pixel observation so
/// that the linear system can use the pinhole matrix.
fn undistort(camera: &Camera, xy: &Vector2<f64>) -> Vector2<f64> {
    let Camera::Euclidean(c) = camera else {
        return *xy;
    };
    if c.radial == 0.0 {
        return *xy;
    }
    let k = &c.intrinsics;
    let ny = (xy.y - k.cy) / k.fy;
    let nx = (xy.x - k.cx - k.skew * ny) / k.fx;
    let target = Vector2::new(nx, ny);
    let mut u = target;
    for _ in 0..20 {
        u = target / (1.0 + c.radial * u.norm_squared());
    }
    Vector2::new(k.fx * u.x + k.skew * u.y + k.cx, k.fy * u.y + k.cy)
}

/// Iterated linear least-squares triangulation: the DLT rows of each view are
/// reweighted by the inverse projective depth of the previous estimate.
pub fn triangulate(
    observations: &[(&Camera, Vector2<f64>)],
    condition_limit: f64,
) -> Result<Triangulation, GeometryError> {
    if observations.len() < 2 {
        return Err(GeometryError::InsufficientPoints {
            needed: 2,
            got: observations.len(),
        });
    }
    let centers: Vec<_> = observations
        .iter()
        .map(|(c, _)| c.center_homogeneous())
        .collect();
    let has_baseline = centers
        .iter()
        .enumerate()
        .any(|(i, a)| centers[i + 1..].iter().any(|b| (a - b).norm() > 1e-12));
    if !has_baseline {
        return Err(GeometryError::Degenerate("zero baseline".into()));
    }

    let mats: Vec<Matrix3x4<f64>> = observations
        .iter()
        .map(|(c, _)| {
            let p = c.matrix();
            p / p.norm()
        })
        .collect();
    let pts: Vec<Vector2<f64>> = observations
        .iter()
        .map(|(c, xy)| undistort(c, xy))
        .collect();
    let n = observations.len();
    let mut weights = vec![1.0; n];
    let mut point = Vector3::zeros();
    let mut condition = f64::INFINITY;
    for iteration in 0..TRIANGULATION_MAX_ITERATIONS {
        let mut a = DMatrix::zeros(2 * n, 3);
        let mut b = DVector::zeros(2 * n);
        for (k, (p, xy)) in mats.iter().zip(&pts).enumerate() {
            for (r, coord) in [xy.x, xy.y].into_iter().enumerate() {
                let row = (p.row(2) * coord - p.row(r)) / weights[k];
                // Row equilibration: unit norm over the three unknown columns.
                let s = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
                let s = if s > 1e-300 { s } else { 1.0 };
                for c in 0..3 {
                    a[(2 * k + r, c)] = row[c] / s;
                }
                b[2 * k + r] = -row[3] / s;
            }
        }
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        condition = if smin > 0.0 {
            smax / smin
        } else {
            f64::INFINITY
        };
        if !condition.is_finite() {
            return Err(GeometryError::IllConditioned(condition));
        }
        let x = svd
            .solve(&b, 0.0)
            .map_err(|_| GeometryError::IllConditioned(condition))?;
        point = Vector3::new(x[0], x[1], x[2]);
        let mut change: f64 = 0.0;
        for (k, p) in mats.iter().enumerate() {
            let w = (p.row(2) * point.push(1.0))[(0, 0)];
            let w = if w.abs() < 1e-12 {
                1e-12_f64.copysign(w)
            } else {
                w
            };
            change = change.max((w - weights[k]).abs() / weights[k].abs().max(1e-300));
            weights[k] = w;
        }
        if iteration > 0 && change < WEIGHT_TOLERANCE {
            break;
        }
    }
    if condition > condition_limit {
        return Err(GeometryError::IllConditioned(condition));
    }
    let mut max_err: f64 = 0.0;
    for (cam, xy) in observations {
        let e = cam
            .project(&point)
            .map(|p| (p - xy).norm())
            .unwrap_or(f64::INFINITY);
        max_err = max_err.max(e);
    }
    Ok(Triangulation {
        point,
        condition,
        max_reprojection_error: max_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{EuclideanCamera, Intrinsics};
    use nalgebra::Matrix3;

    fn look_at(center: Vector3<f64>, target: Vector3<f64>, f: f64) -> Camera {
        let z = (target - center).normalize();
        let up = Vector3::new(0.0, 1.0, 0.0);
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Camera::Euclidean(EuclideanCamera::new(
            Intrinsics::simple(f, 0.0, 0.0),
            r,
            center,
        ))
    }

    #[test]
    fn two_cameras_exact_projection() {
        let target = Vector3::new(0.0, 0.0, 5.0);
        let a = look_at(Vector3::new(-1.0, 0.0, 0.0), Vector3::zeros(), 500.0);
        let b = look_at(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros(), 500.0);
        assert!(a.depth(&target) > 0.0 && b.depth(&target) > 0.0);
        let obs = [
            (&a, a.project(&target).unwrap()),
            (&b, b.project(&target).unwrap()),
        ];
        let t = triangulate(&obs, 1e4).unwrap();
        assert!((t.point - target).norm() < 1e-8);
        assert!(t.max_reprojection_error < 1e-8);
    }

    #[test]
    fn repeated_camera_is_degenerate() {
        let a = look_at(
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 5.0),
            500.0,
        );
        let x = a.project(&Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert!(matches!(
            triangulate(&[(&a, x), (&a, x)], 1e4),
            Err(GeometryError::Degenerate(_))
        ));
    }

    #[test]
    fn tiny_baseline_is_ill_conditioned() {
        let target = Vector3::new(0.0, 0.0, 5.0);
        let a = look_at(Vector3::new(0.0, 0.0, 0.0), target, 500.0);
        let b = look_at(Vector3::new(5e-6, 0.0, 0.0), target, 500.0);
        let obs = [
            (&a, a.project(&target).unwrap()),
            (&b, b.project(&target).unwrap()),
        ];
        assert!(matches!(
            triangulate(&obs, 1e4),
            Err(GeometryError::IllConditioned(_))
        ));
    }
}
