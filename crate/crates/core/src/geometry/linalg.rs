//! Small dense linear-algebra helpers shared by the geometric solvers.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector2, Vector3};

/// Cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Singular values (descending) and the right singular vector of the
/// smallest one, i.e. the least-squares solution of `A x = 0` with `|x| = 1`.
///
/// Matrices with fewer rows than columns are zero-padded so that the full
/// right singular basis is always available.
pub fn null_space(a: &DMatrix<f64>) -> (DVector<f64>, Vec<f64>) {
    let basis = null_basis(a, 1);
    (basis.0.into_iter().next().unwrap(), basis.1)
}

/// The `k` right singular vectors belonging to the smallest singular values,
/// ordered from smallest upwards, plus all singular values in descending order.
pub fn null_basis(a: &DMatrix<f64>, k: usize) -> (Vec<DVector<f64>>, Vec<f64>) {
    let cols = a.ncols();
    let padded;
    let a = if a.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
        padded = p;
        &padded
    } else {
        a
    };
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let vectors = order
        .iter()
        .rev()
        .take(k)
        .map(|&i| v_t.row(i).transpose())
        .collect();
    (vectors, values)
}

/// Isotropic conditioning of 2D points: centroid to the origin, mean
/// distance `sqrt(2)`. Returns the conditioned points and the transform.
pub fn condition_2d(points: &[Vector2<f64>]) -> (Vec<Vector2<f64>>, Matrix3<f64>) {
    let n = points.len().max(1) as f64;
    let centroid = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let s = if mean_dist > 1e-300 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = Matrix3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    );
    let out = points.iter().map(|p| (p - centroid) * s).collect();
    (out, t)
}

/// Isotropic conditioning of 3D points (mean distance `sqrt(3)`).
pub fn condition_3d(points: &[Vector3<f64>]) -> (Vec<Vector3<f64>>, Matrix4<f64>) {
    let n = points.len().max(1) as f64;
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let s = if mean_dist > 1e-300 {
        3f64.sqrt() / mean_dist
    } else {
        1.0
    };
    let mut t = Matrix4::identity() * s;
    t[(3, 3)] = 1.0;
    t[(0, 3)] = -s * centroid.x;
    t[(1, 3)] = -s * centroid.y;
    t[(2, 3)] = -s * centroid.z;
    let out = points.iter().map(|p| (p - centroid) * s).collect();
    (out, t)
}

/// RQ decomposition `M = K R` of a 3x3 matrix with `K` upper triangular with
/// positive diagonal and `R` orthogonal. `det R` carries the sign of `det M`.
pub fn rq3(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    // Flip rows/cols so that QR of the reversed transpose gives RQ.
    let p = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let a = (p * m).transpose();
    let qr = a.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut k = p * r.transpose() * p;
    let mut rot = p * q.transpose();
    for i in 0..3 {
        if k[(i, i)] < 0.0 {
            for row in 0..3 {
                k[(row, i)] = -k[(row, i)];
            }
            for col in 0..3 {
                rot[(i, col)] = -rot[(i, col)];
            }
        }
    }
    (k, rot)
}

/// Nearest proper rotation in Frobenius norm.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Rotation angle of `a^T b` in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Median of a slice (mean of the two middle elements for even lengths).
/// Returns `None` on empty input.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Ratio of the second to the first singular value of a centered point set;
/// close to zero for collinear configurations.
pub fn collinearity_ratio(points: &[Vector3<f64>]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let mut ev: Vec<f64> = cov
        .symmetric_eigenvalues()
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 {
        return 0.0;
    }
    (ev[1] / ev[0]).sqrt()
}

/// Same as [`collinearity_ratio`] but for the third singular value: close to
/// zero for coplanar configurations.
pub fn coplanarity_ratio(points: &[Vector3<f64>]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let mut ev: Vec<f64> = cov
        .symmetric_eigenvalues()
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 {
        return 0.0;
    }
    (ev[2] / ev[0]).sqrt()
}

/// Twice the signed area of the triangle `a b c`, normalised by the product
/// of the two edge lengths (sine of the angle at `a`).
pub fn collinear_2d(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>, tol: f64) -> bool {
    let u = b - a;
    let v = c - a;
    let cross = u.x * v.y - u.y * v.x;
    let scale = u.norm() * v.norm();
    scale <= 1e-300 || (cross / scale).abs() < tol
}

/// Real roots of `a x^3 + b x^2 + c x + d`, polished with Newton steps.
pub fn solve_cubic(a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let scale = a.abs().max(b.abs()).max(c.abs()).max(d.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    let mut roots = Vec::new();
    if a.abs() < 1e-14 * scale {
        if b.abs() < 1e-14 * scale {
            if c.abs() > 1e-14 * scale {
                roots.push(-d / c);
            }
        } else {
            let disc = c * c - 4.0 * b * d;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                let q = -0.5 * (c + c.signum() * sq);
                if q != 0.0 {
                    roots.push(q / b);
                    roots.push(d / q);
                } else {
                    roots.push(0.0);
                }
            }
        }
    } else {
        let (b, c, d) = (b / a, c / a, d / a);
        let q = (3.0 * c - b * b) / 9.0;
        let r = (9.0 * b * c - 27.0 * d - 2.0 * b * b * b) / 54.0;
        let disc = q * q * q + r * r;
        let shift = -b / 3.0;
        if disc > 0.0 {
            let sq = disc.sqrt();
            let s = (r + sq).cbrt();
            let t = (r - sq).cbrt();
            roots.push(shift + s + t);
        } else if q == 0.0 {
            roots.push(shift);
        } else {
            let theta = (r / (-q * q * q).sqrt()).clamp(-1.0, 1.0).acos();
            let m = 2.0 * (-q).sqrt();
            for k in 0..3 {
                roots.push(
                    shift + m * ((theta + 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos(),
                );
            }
        }
    }
    for x in roots.iter_mut() {
        for _ in 0..4 {
            let f = ((a * *x + b) * *x + c) * *x + d;
            let df = (3.0 * a * *x + 2.0 * b) * *x + c;
            if df.abs() < 1e-300 {
                break;
            }
            *x -= f / df;
        }
    }
    roots.sort_by(|x, y| x.total_cmp(y));
    roots.dedup_by(|x, y| (*x - *y).abs() < 1e-12 * (1.0 + x.abs()));
    roots
}
