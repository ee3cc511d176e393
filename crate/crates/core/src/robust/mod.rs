//! Robust estimation: MSAC with bucketed sampling, robust scale, X84
//! rejection and GRIC model selection.

mod msac;
mod problems;

pub use msac::{
    bucket_sample, inlier_cut, msac, BucketGrid, MsacConfig, MsacProblem, RobustFitResult,
};
pub use problems::{
    FundamentalProblem, HomographyProblem, ProjectiveResectionProblem, ResectionProblem,
};

use thiserror::Error;

use crate::geometry::linalg::median;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RobustError {
    #[error("need at least {needed} data, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("no hypothesis gathered a consensus set as large as the minimal sample")]
    NoConsensus,
    #[error("every datum belongs to the best sample")]
    AllInSample,
}

/// Inlier multiplier applied to the robust scale after MSAC.
pub const INLIER_SCALE_FACTOR: f64 = 2.5;

/// `1.4826 (1 + 5 / (N - |S|)) sqrt(med_{i not in S} e_i^2)`.
pub fn robust_scale(residuals: &[f64], best_sample: &[usize]) -> Result<f64, RobustError> {
    let outside: Vec<f64> = residuals
        .iter()
        .enumerate()
        .filter(|(i, _)| !best_sample.contains(i))
        .map(|(_, e)| e * e)
        .collect();
    if outside.is_empty() {
        return Err(RobustError::AllInSample);
    }
    let free = outside.len() as f64;
    let med = median(&outside).unwrap_or(0.0);
    Ok(1.4826 * (1.0 + 5.0 / free) * med.sqrt())
}

/// X84 rejection rule: `|e_i - med e| < 5.2 med |e_j - med e|`. A zero MAD
/// keeps exactly the residuals equal to the median.
pub fn x84_inliers(residuals: &[f64]) -> Vec<bool> {
    let Some(med) = median(residuals) else {
        return Vec::new();
    };
    let dev: Vec<f64> = residuals.iter().map(|e| (e - med).abs()).collect();
    let mad = median(&dev).unwrap_or(0.0);
    if mad == 0.0 {
        return residuals.iter().map(|&e| e == med).collect();
    }
    dev.iter().map(|&d| d < 5.2 * mad).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GricParams {
    /// Number of model parameters.
    pub k: f64,
    /// Manifold dimension.
    pub d: f64,
    /// Measurement dimension.
    pub r: f64,
    pub sigma: f64,
}

impl GricParams {
    pub fn fundamental(sigma: f64) -> Self {
        Self {
            k: 7.0,
            d: 3.0,
            r: 4.0,
            sigma,
        }
    }

    pub fn homography(sigma: f64) -> Self {
        Self {
            k: 8.0,
            d: 2.0,
            r: 4.0,
            sigma,
        }
    }
}

/// `sum rho(e_i^2) + n d log r + k log(r n)` with
/// `rho(x) = min(x / sigma^2, 2 (r - d))`.
pub fn gric(residuals: &[f64], params: &GricParams) -> f64 {
    let n = residuals.len() as f64;
    let cap = 2.0 * (params.r - params.d);
    let s2 = params.sigma * params.sigma;
    let rho: f64 = residuals.iter().map(|e| (e * e / s2).min(cap)).sum();
    rho + n * params.d * params.r.ln() + params.k * (params.r * n).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwoViewModel {
    Homography,
    Fundamental,
}

/// Fundamental only when the homography score exceeds `ratio` times the
/// fundamental score.
pub fn select_model(gric_h: f64, gric_f: f64, ratio: f64) -> TwoViewModel {
    if gric_h > ratio * gric_f {
        TwoViewModel::Fundamental
    } else {
        TwoViewModel::Homography
    }
}
