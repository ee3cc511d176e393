//! Sparse Levenberg-Marquardt bundle adjustment over a subset of a model:
//! free cameras, fixed cameras and active tie-points. Point blocks are
//! eliminated with the Schur complement.

mod blocks;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{Camera, CameraKind, ImageId, Model};
use blocks::{
    camera_plus, linearize, projective_basis, EUCLIDEAN_FULL_DIM, POSE_DIM, PROJECTIVE_DIM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// Pose plus focal length, principal point and radial coefficient.
    EuclideanFreeK,
    /// Pose only.
    EuclideanFixedK,
    /// Eleven degrees of freedom per camera matrix.
    Projective,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub free: BTreeSet<ImageId>,
    pub fixed: BTreeSet<ImageId>,
    /// Tie-point ids; only triangulated points seen by a free camera count.
    pub active: BTreeSet<usize>,
    pub parameterization: Parameterization,
    /// Whether the radial coefficient moves under `EuclideanFreeK`.
    pub refine_radial: bool,
    /// Free cameras whose intrinsics stay fixed under `EuclideanFreeK`.
    pub frozen_intrinsics: BTreeSet<ImageId>,
    /// Under `EuclideanFreeK`, one intrinsics increment shared by all
    /// non-frozen free cameras (which should start from equal intrinsics).
    pub shared_intrinsics: bool,
}

impl BaProblem {
    /// All cameras free, all triangulated points active.
    pub fn full(model: &Model, parameterization: Parameterization) -> Self {
        Self {
            free: model.cameras.keys().copied().collect(),
            fixed: BTreeSet::new(),
            active: model.triangulated().map(|(id, _)| id).collect(),
            parameterization,
            refine_radial: false,
            frozen_intrinsics: BTreeSet::new(),
            shared_intrinsics: false,
        }
    }

    /// Parameterization matching the model frame.
    pub fn default_parameterization(model: &Model) -> Parameterization {
        if model
            .cameras
            .values()
            .any(|c| c.kind() == CameraKind::Projective)
        {
            Parameterization::Projective
        } else {
            Parameterization::EuclideanFixedK
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaOptions {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub relative_tolerance: f64,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-3,
            relative_tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Relative cost decrease fell below the tolerance.
    Converged,
    ZeroCost,
    /// No damping value produced a decrease.
    Stalled,
    /// Iteration cap reached; the best iterate is kept.
    NotConverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BaError {
    #[error("camera {0} is not in the model")]
    UnknownCamera(ImageId),
    #[error("camera {0} is both free and fixed")]
    Overlap(ImageId),
    #[error("camera {0} does not match the requested parameterization")]
    ParameterizationMismatch(ImageId),
    #[error("no residuals: the problem has no active observations")]
    Empty,
    #[error("a point projects onto a principal plane at the starting estimate")]
    InvalidStart,
    #[error("normal equations are singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Schur,
    Dense,
}

struct CamSlot {
    id: ImageId,
    full_dim: usize,
    /// Unlocked indices into the full parameter vector.
    cols: Vec<usize>,
    /// Column of the reduced system for each entry of `cols`.
    global: Vec<usize>,
    basis: Option<SMatrix<f64, 12, 11>>,
}

struct Layout {
    cams: Vec<CamSlot>,
    points: Vec<usize>,
    /// (camera slot, point index, observed pixel)
    obs: Vec<(usize, usize, Vector2<f64>)>,
    n_cam: usize,
}

impl Layout {
    fn n_params(&self) -> usize {
        self.n_cam + 3 * self.points.len()
    }
}

struct ObsLin {
    r: Vector2<f64>,
    jc: DMatrix<f64>,
    jp: Matrix2x3<f64>,
}

fn full_dim(kind: CameraKind, p: Parameterization) -> usize {
    match (kind, p) {
        (CameraKind::Projective, _) => PROJECTIVE_DIM,
        (CameraKind::Euclidean, Parameterization::EuclideanFreeK) => EUCLIDEAN_FULL_DIM,
        (CameraKind::Euclidean, _) => POSE_DIM,
    }
}

/// Locked parameter indices per free camera that remove the gauge freedom.
fn gauge_locks(model: &Model, problem: &BaProblem) -> BTreeMap<ImageId, Vec<usize>> {
    let mut locks: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
    let free: Vec<ImageId> = problem.free.iter().copied().collect();
    let centre = |id: ImageId| model.cameras[&id].as_euclidean().map(|c| c.center);
    let pin_axis = |a: Vector3<f64>, b: Vector3<f64>| 3 + (b - a).iamax();
    match problem.fixed.len() {
        0 => {
            let Some(&first) = free.first() else {
                return locks;
            };
            match model.cameras[&first].kind() {
                CameraKind::Projective => {
                    locks.insert(first, (0..PROJECTIVE_DIM).collect());
                }
                CameraKind::Euclidean => {
                    locks.insert(first, (0..POSE_DIM).collect());
                    if let Some(&second) = free.get(1) {
                        if let (Some(a), Some(b)) = (centre(first), centre(second)) {
                            locks.insert(second, vec![pin_axis(a, b)]);
                        }
                    }
                }
            }
        }
        1 => {
            let fixed = *problem.fixed.iter().next().unwrap();
            if let Some(&first) = free.first() {
                if let (Some(a), Some(b)) = (centre(fixed), centre(first)) {
                    locks.insert(first, vec![pin_axis(a, b)]);
                }
            }
        }
        _ => {}
    }
    if problem.parameterization == Parameterization::EuclideanFreeK {
        for &id in &free {
            if problem.frozen_intrinsics.contains(&id) {
                locks
                    .entry(id)
                    .or_default()
                    .extend(POSE_DIM..EUCLIDEAN_FULL_DIM);
            } else if !problem.refine_radial {
                locks.entry(id).or_default().push(EUCLIDEAN_FULL_DIM - 1);
            }
        }
    }
    locks
}

fn validate(model: &Model, problem: &BaProblem) -> Result<(), BaError> {
    for &id in problem.free.iter().chain(&problem.fixed) {
        let cam = model.cameras.get(&id).ok_or(BaError::UnknownCamera(id))?;
        let projective = problem.parameterization == Parameterization::Projective;
        if (cam.kind() == CameraKind::Projective) != projective {
            return Err(BaError::ParameterizationMismatch(id));
        }
    }
    if let Some(&id) = problem.free.intersection(&problem.fixed).next() {
        return Err(BaError::Overlap(id));
    }
    Ok(())
}

fn build_layout(
    model: &Model,
    problem: &BaProblem,
    locks: &BTreeMap<ImageId, Vec<usize>>,
) -> Layout {
    let mut cams = Vec::new();
    let mut slot_of = BTreeMap::new();
    let mut offset = 0;
    let shared =
        problem.shared_intrinsics && problem.parameterization == Parameterization::EuclideanFreeK;
    let mut shared_cols: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pending_shared = Vec::new();
    for &id in problem.free.iter().chain(&problem.fixed) {
        let cam = &model.cameras[&id];
        let dim = full_dim(cam.kind(), problem.parameterization);
        let cols: Vec<usize> = if problem.free.contains(&id) {
            let locked = locks.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            (0..dim).filter(|k| !locked.contains(k)).collect()
        } else {
            Vec::new()
        };
        let mut global = Vec::with_capacity(cols.len());
        for (k, &c) in cols.iter().enumerate() {
            if shared && c >= POSE_DIM {
                shared_cols.entry(c).or_insert(0);
                pending_shared.push((cams.len(), k, c));
                global.push(usize::MAX);
            } else {
                global.push(offset);
                offset += 1;
            }
        }
        let basis = match cam {
            Camera::Projective(p) => Some(projective_basis(p)),
            Camera::Euclidean(_) => None,
        };
        slot_of.insert(id, cams.len());
        cams.push(CamSlot {
            id,
            full_dim: dim,
            basis,
            cols,
            global,
        });
    }
    for col in shared_cols.values_mut() {
        *col = offset;
        offset += 1;
    }
    for (s, k, c) in pending_shared {
        cams[s].global[k] = shared_cols[&c];
    }
    let mut points = Vec::new();
    let mut obs = Vec::new();
    for &tid in &problem.active {
        let Some(tp) = model.tie_points.get(&tid) else {
            continue;
        };
        if !tp.is_triangulated() || !tp.track.iter().any(|o| problem.free.contains(&o.image)) {
            continue;
        }
        let pi = points.len();
        points.push(tid);
        for o in &tp.track {
            if let Some(&s) = slot_of.get(&o.image) {
                obs.push((s, pi, o.xy));
            }
        }
    }
    Layout {
        cams,
        points,
        obs,
        n_cam: offset,
    }
}

fn residuals(model: &Model, layout: &Layout) -> Option<DVector<f64>> {
    let mut r = DVector::zeros(2 * layout.obs.len());
    for (k, &(s, pi, xy)) in layout.obs.iter().enumerate() {
        let cam = &model.cameras[&layout.cams[s].id];
        let x = model.tie_points[&layout.points[pi]].position?;
        let p = cam.project(&x).ok()?;
        r[2 * k] = p.x - xy.x;
        r[2 * k + 1] = p.y - xy.y;
    }
    Some(r)
}

fn linearize_all(model: &Model, layout: &Layout) -> Option<Vec<ObsLin>> {
    layout
        .obs
        .iter()
        .map(|&(s, pi, xy)| {
            let slot = &layout.cams[s];
            let cam = &model.cameras[&slot.id];
            let x = model.tie_points[&layout.points[pi]].position?;
            let lin = linearize(cam, slot.full_dim, slot.basis.as_ref(), &x, &xy)?;
            let jc = DMatrix::from_fn(2, slot.cols.len(), |r, c| lin.d_camera[slot.cols[c]][r]);
            Some(ObsLin {
                r: lin.residual,
                jc,
                jp: lin.d_point,
            })
        })
        .collect()
}

fn apply(model: &Model, layout: &Layout, delta: &DVector<f64>) -> Model {
    let mut out = model.clone();
    for slot in &layout.cams {
        if slot.cols.is_empty() {
            continue;
        }
        let mut full = vec![0.0; slot.full_dim];
        for (&c, &g) in slot.cols.iter().zip(&slot.global) {
            full[c] = delta[g];
        }
        let cam = &model.cameras[&slot.id];
        out.cameras
            .insert(slot.id, camera_plus(cam, &full, slot.basis.as_ref()));
    }
    for (pi, tid) in layout.points.iter().enumerate() {
        let tp = out.tie_points.get_mut(tid).unwrap();
        let base = layout.n_cam + 3 * pi;
        let d = Vector3::new(delta[base], delta[base + 1], delta[base + 2]);
        tp.position = tp.position.map(|x| x + d);
    }
    out
}

fn damp(a: f64, lambda: f64) -> f64 {
    a + lambda * a.max(1e-12)
}

fn schur_step(layout: &Layout, lin: &[ObsLin], lambda: f64) -> Option<DVector<f64>> {
    let nc = layout.n_cam;
    let np = layout.points.len();
    let mut u = DMatrix::<f64>::zeros(nc, nc);
    let mut gc = DVector::<f64>::zeros(nc);
    let mut v = vec![Matrix3::<f64>::zeros(); np];
    let mut gp = vec![Vector3::<f64>::zeros(); np];
    let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); np];
    for (k, (&(s, pi, _), o)) in layout.obs.iter().zip(lin).enumerate() {
        let slot = &layout.cams[s];
        if !slot.cols.is_empty() {
            let jtj = o.jc.transpose() * &o.jc;
            let g = o.jc.transpose() * o.r;
            for (a, &ga) in slot.global.iter().enumerate() {
                gc[ga] += g[a];
                for (b, &gb) in slot.global.iter().enumerate() {
                    u[(ga, gb)] += jtj[(a, b)];
                }
            }
        }
        v[pi] += o.jp.transpose() * o.jp;
        gp[pi] += o.jp.transpose() * o.r;
        by_point[pi].push(k);
    }
    for i in 0..nc {
        u[(i, i)] = damp(u[(i, i)], lambda);
    }
    let mut vinv = Vec::with_capacity(np);
    for vi in &mut v {
        for i in 0..3 {
            vi[(i, i)] = damp(vi[(i, i)], lambda);
        }
        vinv.push(vi.try_inverse()?);
    }
    let mut s = u;
    let mut rhs = -gc;
    for pi in 0..np {
        let vi = &vinv[pi];
        let ks = &by_point[pi];
        // W_c = Jc^T Jp for each observation of the point.
        let ws: Vec<(&[usize], DMatrix<f64>)> = ks
            .iter()
            .filter_map(|&k| {
                let slot = &layout.cams[layout.obs[k].0];
                if slot.cols.is_empty() {
                    return None;
                }
                let jp = DMatrix::from_fn(2, 3, |r, c| lin[k].jp[(r, c)]);
                Some((slot.global.as_slice(), lin[k].jc.transpose() * jp))
            })
            .collect();
        let vi_d = DMatrix::from_fn(3, 3, |r, c| vi[(r, c)]);
        let g = DVector::from_column_slice(gp[pi].as_slice());
        for (ga, wa) in &ws {
            let wv = wa * &vi_d;
            let wg = &wv * &g;
            for (a, &ia) in ga.iter().enumerate() {
                rhs[ia] += wg[a];
            }
            for (gb, wb) in &ws {
                let block = &wv * wb.transpose();
                for (a, &ia) in ga.iter().enumerate() {
                    for (b, &ib) in gb.iter().enumerate() {
                        s[(ia, ib)] -= block[(a, b)];
                    }
                }
            }
        }
    }
    let dc = if nc > 0 {
        s.cholesky()?.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    let mut delta = DVector::zeros(layout.n_params());
    delta.rows_mut(0, nc).copy_from(&dc);
    let mut rhs_p: Vec<Vector3<f64>> = gp.iter().map(|g| -g).collect();
    for (&(s, pi, _), o) in layout.obs.iter().zip(lin) {
        let slot = &layout.cams[s];
        if slot.cols.is_empty() {
            continue;
        }
        let d = DVector::from_iterator(slot.global.len(), slot.global.iter().map(|&g| dc[g]));
        let wtd = o.jp.transpose() * (&o.jc * d);
        rhs_p[pi] -= Vector3::new(wtd[0], wtd[1], wtd[2]);
    }
    for pi in 0..np {
        let dp = vinv[pi] * rhs_p[pi];
        delta
            .rows_mut(nc + 3 * pi, 3)
            .copy_from_slice(dp.as_slice());
    }
    Some(delta)
}

fn dense_jacobian(layout: &Layout, lin: &[ObsLin]) -> (DMatrix<f64>, DVector<f64>) {
    let mut j = DMatrix::zeros(2 * lin.len(), layout.n_params());
    let mut r = DVector::zeros(2 * lin.len());
    for (k, (&(s, pi, _), o)) in layout.obs.iter().zip(lin).enumerate() {
        let slot = &layout.cams[s];
        for (a, &g) in slot.global.iter().enumerate() {
            j[(2 * k, g)] += o.jc[(0, a)];
            j[(2 * k + 1, g)] += o.jc[(1, a)];
        }
        for rr in 0..2 {
            for c in 0..3 {
                j[(2 * k + rr, layout.n_cam + 3 * pi + c)] = o.jp[(rr, c)];
            }
            r[2 * k + rr] = o.r[rr];
        }
    }
    (j, r)
}

fn dense_step(layout: &Layout, lin: &[ObsLin], lambda: f64) -> Option<DVector<f64>> {
    let (j, r) = dense_jacobian(layout, lin);
    let mut a = j.transpose() * &j;
    for i in 0..a.nrows() {
        a[(i, i)] = damp(a[(i, i)], lambda);
    }
    Some(a.cholesky()?.solve(&(-(j.transpose() * r))))
}

fn prepare(
    model: &Model,
    problem: &BaProblem,
) -> Result<(BTreeMap<ImageId, Vec<usize>>, Layout), BaError> {
    validate(model, problem)?;
    let locks = gauge_locks(model, problem);
    let layout = build_layout(model, problem, &locks);
    if layout.obs.is_empty() {
        return Err(BaError::Empty);
    }
    Ok((locks, layout))
}

/// Minimises the summed squared reprojection error of the problem's
/// observations. Fixed cameras and inactive points are left untouched.
pub fn adjust(
    model: &mut Model,
    problem: &BaProblem,
    options: &BaOptions,
) -> Result<BaReport, BaError> {
    let (locks, mut layout) = prepare(model, problem)?;
    let mut work = model.clone();
    let mut cost = residuals(&work, &layout)
        .ok_or(BaError::InvalidStart)?
        .norm_squared();
    let initial_cost = cost;
    let mut trace = vec![cost];
    let mut lambda = options.initial_lambda;
    let mut iterations = 0;
    let mut termination = Termination::NotConverged;
    if cost == 0.0 {
        termination = Termination::ZeroCost;
    }
    while termination == Termination::NotConverged && iterations < options.max_iterations {
        iterations += 1;
        let lin = linearize_all(&work, &layout).ok_or(BaError::InvalidStart)?;
        let mut accepted = None;
        while lambda < 1e16 {
            if let Some(delta) = schur_step(&layout, &lin, lambda) {
                let cand = apply(&work, &layout, &delta);
                if let Some(c) = residuals(&cand, &layout).map(|r| r.norm_squared()) {
                    if c < cost {
                        accepted = Some((cand, c));
                        lambda = (lambda / 10.0).max(1e-15);
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        let Some((cand, c)) = accepted else {
            termination = Termination::Stalled;
            break;
        };
        let rel = (cost - c) / cost;
        work = cand;
        cost = c;
        trace.push(cost);
        if cost == 0.0 {
            termination = Termination::ZeroCost;
        } else if rel < options.relative_tolerance {
            termination = Termination::Converged;
        }
        layout = build_layout(&work, problem, &locks);
    }
    *model = work;
    Ok(BaReport {
        initial_cost,
        final_cost: cost,
        iterations,
        termination,
        cost_trace: trace,
    })
}

/// Summed squared reprojection error of the problem's observations.
pub fn problem_cost(model: &Model, problem: &BaProblem) -> Result<f64, BaError> {
    let (_, layout) = prepare(model, problem)?;
    residuals(model, &layout)
        .map(|r| r.norm_squared())
        .ok_or(BaError::InvalidStart)
}

/// One damped Gauss-Newton step at the current estimate.
pub fn normal_step(
    model: &Model,
    problem: &BaProblem,
    lambda: f64,
    solver: Solver,
) -> Result<DVector<f64>, BaError> {
    let (_, layout) = prepare(model, problem)?;
    let lin = linearize_all(model, &layout).ok_or(BaError::InvalidStart)?;
    match solver {
        Solver::Schur => schur_step(&layout, &lin, lambda),
        Solver::Dense => dense_step(&layout, &lin, lambda),
    }
    .ok_or(BaError::Singular)
}

/// Largest column-wise relative difference between the analytic Jacobian and
/// central finite differences with step `eps`.
pub fn jacobian_check(model: &Model, problem: &BaProblem, eps: f64) -> Result<f64, BaError> {
    let (_, layout) = prepare(model, problem)?;
    let lin = linearize_all(model, &layout).ok_or(BaError::InvalidStart)?;
    let (j, _) = dense_jacobian(&layout, &lin);
    let mut worst: f64 = 0.0;
    for c in 0..layout.n_params() {
        let mut d = DVector::zeros(layout.n_params());
        d[c] = eps;
        let rp = residuals(&apply(model, &layout, &d), &layout).ok_or(BaError::InvalidStart)?;
        d[c] = -eps;
        let rm = residuals(&apply(model, &layout, &d), &layout).ok_or(BaError::InvalidStart)?;
        let fd = (rp - rm) / (2.0 * eps);
        let diff = (&fd - j.column(c)).norm();
        worst = worst.max(diff / fd.norm().max(1.0));
    }
    Ok(worst)
}
