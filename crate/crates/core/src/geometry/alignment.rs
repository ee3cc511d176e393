use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3};

use super::linalg::{collinearity_ratio, condition_3d, null_space};
use super::GeometryError;

/// `y = s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    /// As a 4x4 point transform.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    pub fn sum_squared_residual(&self, a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (self.apply(x) - y).norm_squared())
            .sum()
    }
}

/// Least-squares similarity mapping `a` onto `b` (Umeyama's closed form with
/// determinant correction).
pub fn absolute_orientation_similarity(
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
) -> Result<Similarity, GeometryError> {
    let n = a.len();
    if n != b.len() || n < 3 {
        return Err(GeometryError::InsufficientPoints {
            needed: 3,
            got: n.min(b.len()),
        });
    }
    if collinearity_ratio(a) < 1e-9 || collinearity_ratio(b) < 1e-9 {
        return Err(GeometryError::Degenerate(
            "collinear correspondences".into(),
        ));
    }
    let nf = n as f64;
    let ma = a.iter().fold(Vector3::zeros(), |s, p| s + p) / nf;
    let mb = b.iter().fold(Vector3::zeros(), |s, p| s + p) / nf;
    let mut cov = Matrix3::zeros();
    let mut var_a = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dy * dx.transpose();
        var_a += dx.norm_squared();
    }
    cov /= nf;
    var_a /= nf;
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let d = if (u * vt).determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let sign = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * sign * vt;
    // Singular values come out in descending order, so the reflection
    // correction lands on the smallest one.
    let sv = &svd.singular_values;
    let trace = sv[0] + sv[1] + d * sv[2];
    let scale = trace / var_a;
    if !(scale > 0.0) {
        return Err(GeometryError::Degenerate("non-positive scale".into()));
    }
    let translation = mb - rotation * ma * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// 3D DLT: the 4x4 collineation `H` with `b ~ H a`, unit Frobenius norm.
pub fn projectivity_dlt_3d(
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
) -> Result<Matrix4<f64>, GeometryError> {
    let n = a.len();
    if n != b.len() || n < 5 {
        return Err(GeometryError::InsufficientPoints {
            needed: 5,
            got: n.min(b.len()),
        });
    }
    let (na, ta) = condition_3d(a);
    let (nb, tb) = condition_3d(b);
    let mut m = DMatrix::zeros(3 * n, 16);
    for i in 0..n {
        let x = na[i].push(1.0);
        for r in 0..3 {
            let row = 3 * i + r;
            for j in 0..4 {
                m[(row, 4 * r + j)] = -x[j];
                m[(row, 12 + j)] = nb[i][r] * x[j];
            }
        }
    }
    let (h, sv) = null_space(&m);
    if sv[14] < 1e-10 * sv[0] {
        return Err(GeometryError::Degenerate(
            "projectivity null space has dimension above one".into(),
        ));
    }
    let hn = Matrix4::from_row_slice(h.as_slice());
    let tb_inv = tb
        .try_inverse()
        .ok_or(GeometryError::Degenerate("conditioning".into()))?;
    let hm = tb_inv * hn * ta;
    Ok(hm / hm.norm())
}
