use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3, Vector4};

use super::linalg::{nearest_rotation, rq3};
use super::GeometryError;

/// Internal camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub skew: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, skew: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            skew,
            cx,
            cy,
        };
        k.validate()?;
        Ok(k)
    }

    /// Zero skew, unit aspect ratio.
    pub fn simple(focal: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            skew: 0.0,
            cx,
            cy,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.skew, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics);
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0,
        )
    }

    /// Reads an upper-triangular matrix, normalising `k33` to one.
    pub fn from_matrix(k: &Matrix3<f64>) -> Result<Self, GeometryError> {
        let s = k[(2, 2)];
        if s.abs() < 1e-300 {
            return Err(GeometryError::InvalidIntrinsics);
        }
        let k = k / s;
        Self::new(k[(0, 0)], k[(1, 1)], k[(0, 1)], k[(0, 2)], k[(1, 2)])
    }

    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

/// A calibrated camera: `P = K [R | -R C]` plus an optional one-coefficient
/// radial distortion applied to normalised image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EuclideanCamera {
    pub intrinsics: Intrinsics,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub radial: f64,
}

impl EuclideanCamera {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self {
            intrinsics,
            rotation,
            center,
            radial: 0.0,
        }
    }

    pub fn translation(&self) -> Vector3<f64> {
        -self.rotation * self.center
    }

    pub fn matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.set_column(3, &self.translation());
        self.intrinsics.matrix() * rt
    }

    /// Decomposes a finite projective camera into `K`, `R`, `C`. The overall
    /// sign of `p` is irrelevant.
    pub fn from_matrix(p: &Matrix3x4<f64>) -> Result<Self, GeometryError> {
        let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
        let mut p4: Vector3<f64> = p.column(3).into_owned();
        let det = m.determinant();
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(GeometryError::Degenerate(
                "camera has a singular left 3x3 block".into(),
            ));
        }
        if det < 0.0 {
            m = -m;
            p4 = -p4;
        }
        let (k, r) = rq3(&m);
        let intrinsics = Intrinsics::from_matrix(&k)?;
        let center = -m
            .try_inverse()
            .ok_or(GeometryError::Degenerate("singular camera".into()))?
            * p4;
        Ok(Self::new(intrinsics, nearest_rotation(&r), center))
    }

    /// Camera-frame coordinates of a world point.
    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (point - self.center)
    }

    /// Principal-axis direction in world coordinates.
    pub fn viewing_direction(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraKind {
    Euclidean,
    Projective,
}

/// A camera in a model: either calibrated with pose, or a raw 3x4 matrix
/// defined up to a projectivity of space.
#[derive(Debug, Clone, PartialEq)]
pub enum Camera {
    Euclidean(EuclideanCamera),
    Projective(Matrix3x4<f64>),
}

impl Camera {
    pub fn kind(&self) -> CameraKind {
        match self {
            Camera::Euclidean(_) => CameraKind::Euclidean,
            Camera::Projective(_) => CameraKind::Projective,
        }
    }

    pub fn matrix(&self) -> Matrix3x4<f64> {
        match self {
            Camera::Euclidean(c) => c.matrix(),
            Camera::Projective(p) => *p,
        }
    }

    pub fn as_euclidean(&self) -> Option<&EuclideanCamera> {
        match self {
            Camera::Euclidean(c) => Some(c),
            Camera::Projective(_) => None,
        }
    }

    /// Pinhole projection to pixels; radial distortion is applied for
    /// Euclidean cameras carrying a non-zero coefficient.
    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        match self {
            Camera::Euclidean(c) => {
                let xc = c.to_camera(point);
                if xc.z.abs() < 1e-12 {
                    return Err(GeometryError::PointAtInfinity);
                }
                let (x, y) = (xc.x / xc.z, xc.y / xc.z);
                let d = 1.0 + c.radial * (x * x + y * y);
                let k = &c.intrinsics;
                Ok(Vector2::new(
                    k.fx * d * x + k.skew * d * y + k.cx,
                    k.fy * d * y + k.cy,
                ))
            }
            Camera::Projective(p) => {
                let h = p * point.push(1.0);
                if h.z.abs() < 1e-12 {
                    return Err(GeometryError::PointAtInfinity);
                }
                Ok(Vector2::new(h.x / h.z, h.y / h.z))
            }
        }
    }

    /// Homogeneous camera centre (right null vector of `P`), unit norm with a
    /// non-negative last coordinate.
    pub fn center_homogeneous(&self) -> Vector4<f64> {
        let c = match self {
            Camera::Euclidean(e) => e.center.push(1.0),
            Camera::Projective(p) => projective_center(p),
        };
        let c = c / c.norm();
        if c.w < 0.0 {
            -c
        } else {
            c
        }
    }

    /// Sign-invariant depth indicator: positive when the point is in front.
    pub fn depth(&self, point: &Vector3<f64>) -> f64 {
        match self {
            Camera::Euclidean(c) => c.to_camera(point).z,
            Camera::Projective(p) => {
                let m = p.fixed_view::<3, 3>(0, 0);
                let w = p.row(2).dot(&point.push(1.0).transpose());
                m.determinant().signum() * w
            }
        }
    }
}

/// Right null vector of a rank-3 camera matrix via cofactors.
pub fn projective_center(p: &Matrix3x4<f64>) -> Vector4<f64> {
    let minor = |skip: usize| {
        let cols: Vec<usize> = (0..4).filter(|&c| c != skip).collect();
        Matrix3::from_fn(|r, c| p[(r, cols[c])]).determinant()
    };
    Vector4::new(minor(0), -minor(1), minor(2), -minor(3))
}
