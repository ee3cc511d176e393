//! Dense Levenberg-Marquardt with a forward-model closure and central
//! finite-difference Jacobians. Used for the small refinements (pose,
//! camera matrix, two-view matrices, autocalibration parameters); bundle
//! adjustment has its own sparse solver.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    /// Stop when the relative cost decrease of an accepted step is below this.
    pub relative_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            initial_lambda: 1e-3,
            relative_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: DVector<f64>,
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimises `|f(x)|^2`. `f` returns `None` for parameter values outside its
/// domain; such steps are rejected.
pub fn minimize<F>(f: F, x0: DVector<f64>, options: LmOptions) -> Option<LmOutcome>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let mut x = x0;
    let mut r = f(&x)?;
    let initial_cost = r.norm_squared();
    let mut cost = initial_cost;
    let mut lambda = options.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;
    if cost == 0.0 {
        return Some(LmOutcome {
            params: x,
            initial_cost,
            cost,
            iterations,
            converged: true,
        });
    }
    let mut jac = numeric_jacobian(&f, &x, r.len())?;
    while iterations < options.max_iterations {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = &x + &step;
            match f(&candidate) {
                Some(rc) if rc.norm_squared() < cost => {
                    let new_cost = rc.norm_squared();
                    let rel = (cost - new_cost) / cost.max(1e-300);
                    x = candidate;
                    r = rc;
                    cost = new_cost;
                    lambda = (lambda / 10.0).max(1e-15);
                    accepted = true;
                    if rel < options.relative_tolerance || cost == 0.0 {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            // No descent direction left at machine precision.
            converged = true;
            break;
        }
        if converged {
            break;
        }
        jac = numeric_jacobian(&f, &x, r.len())?;
    }
    Some(LmOutcome {
        params: x,
        initial_cost,
        cost,
        iterations,
        converged,
    })
}

pub fn numeric_jacobian<F>(f: &F, x: &DVector<f64>, m: usize) -> Option<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(m, x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1e-3);
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Some(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_exponential_decay() {
        let ts: Vec<f64> = (0..20).map(|i| i as f64 * 0.25).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
        let f = |p: &DVector<f64>| {
            Some(DVector::from_iterator(
                ts.len(),
                ts.iter()
                    .zip(&ys)
                    .map(|(t, y)| p[0] * (-p[1] * t).exp() - y),
            ))
        };
        let out = minimize(f, DVector::from_vec(vec![1.0, 0.1]), LmOptions::default()).unwrap();
        assert!((out.params[0] - 3.0).abs() < 1e-6);
        assert!((out.params[1] - 0.7).abs() < 1e-6);
        assert!(out.cost <= out.initial_cost);
    }
}
