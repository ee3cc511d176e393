//! Two-view solvers. Correspondences are `(a, b)` pixel pairs and the
//! epipolar convention is `b^T F a = 0`, `b ~ H a`.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use super::linalg::{collinear_2d, condition_2d, null_basis, null_space, solve_cubic};
use super::GeometryError;

fn h(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

fn mat3_from(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&v[..9])
}

fn normalize_fro(m: Matrix3<f64>) -> Matrix3<f64> {
    let n = m.norm();
    if n > 0.0 {
        m / n
    } else {
        m
    }
}

fn enforce_rank2(f: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = f.svd(true, true);
    let mut s = svd.singular_values;
    // nalgebra returns sorted singular values for 3x3 but do not rely on it.
    let (imin, _) =
        s.iter().enumerate().fold(
            (0, f64::INFINITY),
            |acc, (i, &v)| {
                if v < acc.1 {
                    (i, v)
                } else {
                    acc
                }
            },
        );
    s[imin] = 0.0;
    svd.u.unwrap() * Matrix3::from_diagonal(&s) * svd.v_t.unwrap()
}

fn epipolar_design(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.len(), 9);
    for (i, (pa, pb)) in a.iter().zip(b).enumerate() {
        let row = [
            pb.x * pa.x,
            pb.x * pa.y,
            pb.x,
            pb.y * pa.x,
            pb.y * pa.y,
            pb.y,
            pa.x,
            pa.y,
            1.0,
        ];
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

/// Normalised eight-point algorithm (least squares for more than eight
/// pairs) with rank-2 enforcement. The result has unit Frobenius norm.
pub fn solve_fundamental(
    a: &[Vector2<f64>],
    b: &[Vector2<f64>],
) -> Result<Matrix3<f64>, GeometryError> {
    if a.len() != b.len() || a.len() < 8 {
        return Err(GeometryError::InsufficientPoints {
            needed: 8,
            got: a.len().min(b.len()),
        });
    }
    let (na, ta) = condition_2d(a);
    let (nb, tb) = condition_2d(b);
    let design = epipolar_design(&na, &nb);
    let (v, sv) = null_space(&design);
    if sv[7] < 1e-9 * sv[0] {
        return Err(GeometryError::Degenerate(
            "epipolar design matrix has rank below 8".into(),
        ));
    }
    let f = enforce_rank2(&mat3_from(v.as_slice()));
    let f = tb.transpose() * f * ta;
    Ok(normalize_fro(enforce_rank2(&normalize_fro(f))))
}

/// Seven-point minimal solver: one to three fundamental matrices, one per
/// real root of the determinant cubic.
pub fn solve_fundamental_7pt(
    a: &[Vector2<f64>],
    b: &[Vector2<f64>],
) -> Result<Vec<Matrix3<f64>>, GeometryError> {
    if a.len() != 7 || b.len() != 7 {
        return Err(GeometryError::InsufficientPoints {
            needed: 7,
            got: a.len().min(b.len()),
        });
    }
    let (na, ta) = condition_2d(a);
    let (nb, tb) = condition_2d(b);
    let design = epipolar_design(&na, &nb);
    let (basis, sv) = null_basis(&design, 2);
    if sv[6] < 1e-9 * sv[0] {
        return Err(GeometryError::Degenerate(
            "seven-point design matrix has rank below 7".into(),
        ));
    }
    let f1 = mat3_from(basis[0].as_slice());
    let f2 = mat3_from(basis[1].as_slice());
    // det(x F1 + (1 - x) F2) sampled at x = 0, 1, -1, 2 and interpolated.
    let det_at = |x: f64| (f1 * x + f2 * (1.0 - x)).determinant();
    let (d0, d1, dm, d2) = (det_at(0.0), det_at(1.0), det_at(-1.0), det_at(2.0));
    let c0 = d0;
    let c2 = 0.5 * (d1 + dm) - d0;
    let s = 0.5 * (d1 - dm);
    let c3 = (d2 - 4.0 * c2 - c0 - 2.0 * s) / 6.0;
    let c1 = s - c3;
    let roots = solve_cubic(c3, c2, c1, c0);
    if roots.is_empty() {
        return Err(GeometryError::Degenerate(
            "determinant cubic has no real root".into(),
        ));
    }
    Ok(roots
        .into_iter()
        .map(|x| {
            let f = f1 * x + f2 * (1.0 - x);
            normalize_fro(tb.transpose() * f * ta)
        })
        .collect())
}

/// First-order geometric (Sampson) distance of a pair to `b^T F a = 0`.
pub fn fundamental_sampson(f: &Matrix3<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let (xa, xb) = (h(a), h(b));
    let fa = f * xa;
    let fb = f.transpose() * xb;
    let e = xb.dot(&fa);
    let denom = fa.x * fa.x + fa.y * fa.y + fb.x * fb.x + fb.y * fb.y;
    if denom <= 1e-300 {
        return f64::INFINITY;
    }
    e.abs() / denom.sqrt()
}

/// Normalised DLT homography. Minimal samples (exactly four pairs) with
/// three collinear points in either image are rejected.
pub fn solve_homography(
    a: &[Vector2<f64>],
    b: &[Vector2<f64>],
) -> Result<Matrix3<f64>, GeometryError> {
    if a.len() != b.len() || a.len() < 4 {
        return Err(GeometryError::InsufficientPoints {
            needed: 4,
            got: a.len().min(b.len()),
        });
    }
    if a.len() == 4 {
        for pts in [a, b] {
            for skip in 0..4 {
                let t: Vec<&Vector2<f64>> = pts
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != skip)
                    .map(|(_, p)| p)
                    .collect();
                if collinear_2d(t[0], t[1], t[2], 1e-6) {
                    return Err(GeometryError::Degenerate(
                        "collinear homography sample".into(),
                    ));
                }
            }
        }
    }
    let (na, ta) = condition_2d(a);
    let (nb, tb) = condition_2d(b);
    let mut m = DMatrix::zeros(2 * a.len(), 9);
    for (i, (pa, pb)) in na.iter().zip(&nb).enumerate() {
        let r0 = [
            0.0,
            0.0,
            0.0,
            -pa.x,
            -pa.y,
            -1.0,
            pb.y * pa.x,
            pb.y * pa.y,
            pb.y,
        ];
        let r1 = [
            pa.x,
            pa.y,
            1.0,
            0.0,
            0.0,
            0.0,
            -pb.x * pa.x,
            -pb.x * pa.y,
            -pb.x,
        ];
        for j in 0..9 {
            m[(2 * i, j)] = r0[j];
            m[(2 * i + 1, j)] = r1[j];
        }
    }
    let (v, sv) = null_space(&m);
    if sv[7] < 1e-9 * sv[0] {
        return Err(GeometryError::Degenerate(
            "homography design matrix rank below 8".into(),
        ));
    }
    let hn = mat3_from(v.as_slice());
    let tb_inv = tb
        .try_inverse()
        .ok_or(GeometryError::Degenerate("conditioning".into()))?;
    let hm = normalize_fro(tb_inv * hn * ta);
    if hm.determinant().abs() < 1e-14 {
        return Err(GeometryError::Degenerate("singular homography".into()));
    }
    Ok(hm)
}

/// First-order geometric (Sampson) distance of a pair to the homography
/// manifold in the joint 4D measurement space.
pub fn homography_sampson(hm: &Matrix3<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let xa = h(a);
    let h1 = hm.row(0).transpose();
    let h2 = hm.row(1).transpose();
    let h3 = hm.row(2).transpose();
    let (d1, d2, d3) = (h1.dot(&xa), h2.dot(&xa), h3.dot(&xa));
    let e1 = -d2 + b.y * d3;
    let e2 = d1 - b.x * d3;
    let j = nalgebra::Matrix2x4::new(
        -h2.x + b.y * h3.x,
        -h2.y + b.y * h3.y,
        0.0,
        d3,
        h1.x - b.x * h3.x,
        h1.y - b.x * h3.y,
        -d3,
        0.0,
    );
    let jjt = j * j.transpose();
    match jjt.try_inverse() {
        Some(inv) => {
            let e = nalgebra::Vector2::new(e1, e2);
            (e.transpose() * inv * e)[(0, 0)].max(0.0).sqrt()
        }
        None => f64::INFINITY,
    }
}

/// `d(b, H a)^2 + d(a, H^-1 b)^2`, square-rooted.
pub fn symmetric_transfer_error(hm: &Matrix3<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let Some(inv) = hm.try_inverse() else {
        return f64::INFINITY;
    };
    let fwd = hm * h(a);
    let bwd = inv * h(b);
    if fwd.z.abs() < 1e-300 || bwd.z.abs() < 1e-300 {
        return f64::INFINITY;
    }
    let d1 = (fwd.xy() / fwd.z - b).norm_squared();
    let d2 = (bwd.xy() / bwd.z - a).norm_squared();
    (d1 + d2).sqrt()
}

/// `E = K_b^T F K_a`.
pub fn essential_from_fundamental(
    f: &Matrix3<f64>,
    ka: &Matrix3<f64>,
    kb: &Matrix3<f64>,
) -> Matrix3<f64> {
    kb.transpose() * f * ka
}

/// Closest essential matrix (singular values `(1, 1, 0)`).
pub fn project_to_essential(e: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = e.svd(true, true);
    svd.u.unwrap() * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * svd.v_t.unwrap()
}

/// Relative pose of the second camera (`[R | t]`, first camera `[I | 0]`).
#[derive(Debug, Clone)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    /// Unit-norm translation.
    pub translation: Vector3<f64>,
    /// Points in front of both cameras for each of the four candidates.
    pub front_counts: [usize; 4],
    pub chosen: usize,
}

impl RelativePose {
    /// Whether the selected candidate strictly beats the other three.
    pub fn is_unique(&self) -> bool {
        let best = self.front_counts[self.chosen];
        self.front_counts.iter().filter(|&&c| c == best).count() == 1
    }
}

/// Factorises an essential matrix and selects the candidate with the most
/// points in front of both cameras. `pairs` are normalised image coordinates
/// (`K^-1 x`).
pub fn relative_orientation(
    e: &Matrix3<f64>,
    pairs: &[(Vector2<f64>, Vector2<f64>)],
) -> Result<RelativePose, GeometryError> {
    let svd = e.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let sv = [sv[0], sv[1], sv[2]];
    if sv[0] <= 1e-12 || (sv[0] - sv[1]) > 1e-6 * sv[0] || sv[2] > 1e-6 * sv[0] {
        return Err(GeometryError::NotEssential(sv));
    }
    // Re-decompose with a guaranteed ordering.
    let e = project_to_essential(e);
    let svd = e.svd(true, true);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let u0 = svd.u.unwrap();
    let vt0 = svd.v_t.unwrap();
    let mut u = Matrix3::from_columns(&[u0.column(idx[0]), u0.column(idx[1]), u0.column(idx[2])]);
    let mut v = Matrix3::from_columns(&[
        vt0.row(idx[0]).transpose(),
        vt0.row(idx[1]).transpose(),
        vt0.row(idx[2]).transpose(),
    ]);
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v.determinant() < 0.0 {
        v.column_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v.transpose();
    let r2 = u * w.transpose() * v.transpose();
    let t: Vector3<f64> = u.column(2).into_owned();
    let candidates = [(r1, t), (r1, -t), (r2, t), (r2, -t)];
    let mut front_counts = [0usize; 4];
    for (k, (r, t)) in candidates.iter().enumerate() {
        front_counts[k] = pairs
            .iter()
            .filter(|(a, b)| in_front_of_both(r, t, a, b))
            .count();
    }
    let chosen = (0..4)
        .max_by_key(|&k| (front_counts[k], std::cmp::Reverse(k)))
        .unwrap();
    if 2 * front_counts[chosen] <= pairs.len() {
        return Err(GeometryError::NoCheiralSolution);
    }
    let (rotation, translation) = candidates[chosen];
    Ok(RelativePose {
        rotation,
        translation,
        front_counts,
        chosen,
    })
}

fn in_front_of_both(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    a: &Vector2<f64>,
    b: &Vector2<f64>,
) -> bool {
    // Linear two-view triangulation with P1 = [I|0], P2 = [R|t].
    let mut m = DMatrix::zeros(4, 4);
    let p2 = |row: usize, col: usize| if col < 3 { r[(row, col)] } else { t[row] };
    for col in 0..4 {
        let p1 = |row: usize| if col == row { 1.0 } else { 0.0 };
        m[(0, col)] = a.x * p1(2) - p1(0);
        m[(1, col)] = a.y * p1(2) - p1(1);
        m[(2, col)] = b.x * p2(2, col) - p2(0, col);
        m[(3, col)] = b.y * p2(2, col) - p2(1, col);
    }
    let (x, _) = null_space(&m);
    if x[3].abs() < 1e-12 * x.norm() {
        return false;
    }
    let p = Vector3::new(x[0], x[1], x[2]) / x[3];
    p.z > 0.0 && (r * p + t).z > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig(
        seed: u64,
        n: usize,
        planar: bool,
    ) -> (
        Vec<Vector2<f64>>,
        Vec<Vector2<f64>>,
        Matrix3<f64>,
        Vector3<f64>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Rotation3::from_euler_angles(
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.2..0.2),
        )
        .into_inner();
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        );
        let k = Matrix3::new(800.0, 0.0, 320.0, 0.0, 800.0, 240.0, 0.0, 0.0, 1.0);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..n {
            let z = if planar {
                6.0
            } else {
                rng.random_range(4.0..8.0)
            };
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), z);
            let pa = k * x;
            let pb = k * (r * x + t);
            a.push(pa.xy() / pa.z);
            b.push(pb.xy() / pb.z);
        }
        (a, b, r, t)
    }

    #[test]
    fn fundamental_exact_rig() {
        let (a, b, _, _) = rig(1, 30, false);
        let f = solve_fundamental(&a, &b).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            let algebraic = (h(pb).transpose() * f * h(pa))[(0, 0)];
            assert!(algebraic.abs() < 1e-9, "{algebraic}");
            assert!(fundamental_sampson(&f, pa, pb) < 1e-6);
        }
        assert!(f.determinant().abs() < 1e-12);
    }

    #[test]
    fn fundamental_planar_eight_is_degenerate() {
        let (a, b, _, _) = rig(2, 8, true);
        assert!(matches!(
            solve_fundamental(&a, &b),
            Err(GeometryError::Degenerate(_))
        ));
    }

    #[test]
    fn seven_point_solutions_satisfy_constraints() {
        for seed in 0..20 {
            let (a, b, _, _) = rig(100 + seed, 7, false);
            let fs = solve_fundamental_7pt(&a, &b).unwrap();
            assert!(!fs.is_empty() && fs.len() <= 3);
            for f in fs {
                assert!(f.determinant().abs() < 1e-9);
                for (pa, pb) in a.iter().zip(&b) {
                    assert!(fundamental_sampson(&f, pa, pb) < 1e-9, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn homography_identity_and_planar() {
        let pts: Vec<Vector2<f64>> = (0..6)
            .map(|i| Vector2::new((i * 37 % 11) as f64 * 10.0, (i * 53 % 7) as f64 * 13.0))
            .collect();
        let hm = solve_homography(&pts, &pts).unwrap();
        let hm = hm / hm[(2, 2)];
        assert!((hm - Matrix3::identity()).norm() < 1e-9);

        let (a, b, _, _) = rig(3, 20, true);
        let hm = solve_homography(&a, &b).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert!(symmetric_transfer_error(&hm, pa, pb) < 1e-9);
            assert!(homography_sampson(&hm, pa, pb) < 1e-9);
        }
    }

    #[test]
    fn collinear_homography_sample_is_degenerate() {
        let a = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 1.0),
            Vector2::new(2.0, 2.0),
            Vector2::new(5.0, 0.0),
        ];
        assert!(matches!(
            solve_homography(&a, &a),
            Err(GeometryError::Degenerate(_))
        ));
    }

    fn normalized(k: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
        let v = k.try_inverse().unwrap() * h(p);
        v.xy() / v.z
    }

    #[test]
    fn relative_orientation_recovers_pose() {
        let k = Matrix3::new(800.0, 0.0, 320.0, 0.0, 800.0, 240.0, 0.0, 0.0, 1.0);
        let (a, b, r, t) = rig(4, 40, false);
        let e = super::super::linalg::skew(&t) * r;
        let pairs: Vec<_> = a
            .iter()
            .zip(&b)
            .map(|(pa, pb)| (normalized(&k, pa), normalized(&k, pb)))
            .collect();
        let pose = relative_orientation(&(e * 3.0), &pairs).unwrap();
        assert!(super::super::linalg::rotation_angle_between(&pose.rotation, &r) < 1e-6);
        assert!((pose.translation - t.normalize()).norm() < 1e-6);
        assert!(pose.is_unique());
    }

    #[test]
    fn pure_rotation_is_not_essential() {
        let r = Rotation3::from_euler_angles(0.1, 0.2, 0.3).into_inner();
        let e = super::super::linalg::skew(&Vector3::zeros()) * r;
        assert!(matches!(
            relative_orientation(&e, &[]),
            Err(GeometryError::NotEssential(_))
        ));
    }
}
