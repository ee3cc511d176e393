use nalgebra::{Matrix4, Vector2, Vector3};

use crate::geometry::{absolute_orientation_similarity, projectivity_dlt_3d, Camera};
use crate::robust::MsacProblem;

/// Per common tie-point: its position in each model and the observations
/// (camera, pixel) of each model.
pub(crate) struct Common<'a> {
    pub small: Vec<Vector3<f64>>,
    pub large: Vec<Vector3<f64>>,
    pub small_obs: Vec<Vec<(&'a Camera, Vector2<f64>)>>,
    pub large_obs: Vec<Vec<(&'a Camera, Vector2<f64>)>>,
}

/// Robust estimation of the transformation mapping the smaller model onto
/// the larger, scored by mean pixel displacement in both models' cameras.
pub(crate) struct AlignProblem<'a> {
    pub common: &'a Common<'a>,
    pub similarity: bool,
}

fn dehomogenize(t: &Matrix4<f64>, x: &Vector3<f64>) -> Option<Vector3<f64>> {
    let h = t * x.push(1.0);
    (h.w.abs() > 1e-12 * h.norm()).then(|| h.xyz() / h.w)
}

fn mean_displacement(x: &Vector3<f64>, obs: &[(&Camera, Vector2<f64>)], out: &mut (f64, usize)) {
    for (cam, xy) in obs {
        let e = cam
            .project(x)
            .map(|p| (p - xy).norm())
            .unwrap_or(f64::INFINITY);
        out.0 += e;
        out.1 += 1;
    }
}

impl AlignProblem<'_> {
    fn fit(&self, idx: &[usize]) -> Option<Matrix4<f64>> {
        let a: Vec<Vector3<f64>> = idx.iter().map(|&i| self.common.small[i]).collect();
        let b: Vec<Vector3<f64>> = idx.iter().map(|&i| self.common.large[i]).collect();
        if self.similarity {
            absolute_orientation_similarity(&a, &b)
                .ok()
                .map(|s| s.matrix())
        } else {
            projectivity_dlt_3d(&a, &b).ok()
        }
    }
}

impl MsacProblem for AlignProblem<'_> {
    /// Forward transformation and its inverse.
    type Model = (Matrix4<f64>, Matrix4<f64>);

    fn len(&self) -> usize {
        self.common.small.len()
    }

    fn sample_size(&self) -> usize {
        if self.similarity {
            3
        } else {
            5
        }
    }

    fn fit_minimal(&self, sample: &[usize]) -> Vec<Self::Model> {
        self.fit(sample)
            .and_then(|t| t.try_inverse().map(|inv| (t, inv)))
            .into_iter()
            .collect()
    }

    fn fit_refined(&self, inliers: &[usize], _initial: &Self::Model) -> Option<Self::Model> {
        let t = self.fit(inliers)?;
        Some((t, t.try_inverse()?))
    }

    fn residual(&self, (t, inv): &Self::Model, i: usize) -> f64 {
        let mut acc = (0.0, 0);
        match dehomogenize(t, &self.common.small[i]) {
            Some(x) => mean_displacement(&x, &self.common.large_obs[i], &mut acc),
            None => return f64::INFINITY,
        }
        match dehomogenize(inv, &self.common.large[i]) {
            Some(x) => mean_displacement(&x, &self.common.small_obs[i], &mut acc),
            None => return f64::INFINITY,
        }
        acc.0 / acc.1.max(1) as f64
    }
}

pub(crate) fn transform_point(t: &Matrix4<f64>, x: &Vector3<f64>) -> Option<Vector3<f64>> {
    dehomogenize(t, x)
}
