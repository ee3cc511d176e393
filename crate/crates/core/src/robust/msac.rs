use std::collections::BTreeMap;

use nalgebra::Vector2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{robust_scale, RobustError, INLIER_SCALE_FACTOR};

/// A robust-fitting problem: minimal solver, refit and residual.
pub trait MsacProblem {
    type Model: Clone;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample_size(&self) -> usize;

    /// Zero or more hypotheses from a minimal sample.
    fn fit_minimal(&self, sample: &[usize]) -> Vec<Self::Model>;

    /// Least-squares re-estimate on an inlier subset.
    fn fit_refined(&self, inliers: &[usize], initial: &Self::Model) -> Option<Self::Model>;

    fn residual(&self, model: &Self::Model, i: usize) -> f64;

    /// Image location used for bucketing; `None` disables it.
    fn location(&self, _i: usize) -> Option<Vector2<f64>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsacConfig {
    pub max_iterations: usize,
    /// Residual cap `T` (same unit as the residuals).
    pub inlier_threshold: f64,
    /// Bucket side (pixels); non-positive disables bucketing.
    pub bucket_size: f64,
    pub seed: u64,
    /// Per-invocation stream id (e.g. the image pair).
    pub stream: u64,
    pub confidence: f64,
}

impl MsacConfig {
    pub fn new(inlier_threshold: f64, bucket_size: f64, seed: u64) -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold,
            bucket_size,
            seed,
            stream: 0,
            confidence: 0.99,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct RobustFitResult<M> {
    pub model: M,
    pub inlier_mask: Vec<bool>,
    /// Best MSAC score `sum min(e^2, T^2)`.
    pub score: f64,
    pub sigma_star: f64,
    pub best_sample: Vec<usize>,
    pub iterations: usize,
    /// Score of each accepted hypothesis, in order.
    pub score_trace: Vec<f64>,
}

impl<M> RobustFitResult<M> {
    pub fn inliers(&self) -> Vec<usize> {
        self.inlier_mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

/// Square-cell bucketing of data locations.
#[derive(Debug, Clone)]
pub struct BucketGrid {
    pub buckets: Vec<Vec<usize>>,
    /// Bucket of each datum.
    pub bucket_of: Vec<usize>,
}

impl BucketGrid {
    pub fn new(locations: &[Vector2<f64>], size: f64) -> Self {
        let mut map: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, p) in locations.iter().enumerate() {
            let key = ((p.x / size).floor() as i64, (p.y / size).floor() as i64);
            map.entry(key).or_default().push(i);
        }
        let mut bucket_of = vec![0; locations.len()];
        let buckets: Vec<Vec<usize>> = map.into_values().collect();
        for (b, members) in buckets.iter().enumerate() {
            for &i in members {
                bucket_of[i] = b;
            }
        }
        Self { buckets, bucket_of }
    }
}

/// Draws `k` distinct non-empty buckets uniformly, then one datum from each.
pub fn bucket_sample<R: Rng>(grid: &BucketGrid, k: usize, rng: &mut R) -> Option<Vec<usize>> {
    if grid.buckets.len() < k {
        return None;
    }
    let chosen = index::sample(rng, grid.buckets.len(), k);
    Some(
        chosen
            .iter()
            .map(|b| {
                let members = &grid.buckets[b];
                members[rng.random_range(0..members.len())]
            })
            .collect(),
    )
}

fn adaptive_budget(inlier_ratio: f64, sample_size: usize, confidence: f64, cap: usize) -> usize {
    let good = inlier_ratio.powi(sample_size as i32);
    if good <= 0.0 {
        return cap;
    }
    if good >= 1.0 {
        return 1;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good).ln();
    if !n.is_finite() {
        return cap;
    }
    (n.ceil() as usize).clamp(1, cap)
}

/// MSAC followed by the robust-scale inlier rule and a least-squares refit.
pub fn msac<P: MsacProblem>(
    problem: &P,
    config: &MsacConfig,
) -> Result<RobustFitResult<P::Model>, RobustError> {
    let n = problem.len();
    let s = problem.sample_size();
    if n < s {
        return Err(RobustError::InsufficientData { needed: s, got: n });
    }
    let grid = if config.bucket_size > 0.0 {
        let locs: Option<Vec<Vector2<f64>>> = (0..n).map(|i| problem.location(i)).collect();
        locs.map(|l| BucketGrid::new(&l, config.bucket_size))
            .filter(|g| g.buckets.len() >= s)
    } else {
        None
    };
    let mut rng = config.rng();
    let t2 = config.inlier_threshold * config.inlier_threshold;
    let mut best: Option<(P::Model, f64, Vec<usize>)> = None;
    let mut best_score = f64::INFINITY;
    let mut score_trace = Vec::new();
    let mut budget = config.max_iterations.max(1);
    let mut iterations = 0;
    while iterations < budget {
        iterations += 1;
        let sample = match &grid {
            Some(g) => bucket_sample(g, s, &mut rng).expect("enough buckets"),
            None => index::sample(&mut rng, n, s).into_vec(),
        };
        for model in problem.fit_minimal(&sample) {
            let mut score = 0.0;
            let mut inliers = 0usize;
            for i in 0..n {
                let e = problem.residual(&model, i);
                let e2 = if e.is_finite() { e * e } else { f64::INFINITY };
                if e2 < t2 {
                    inliers += 1;
                }
                score += e2.min(t2);
                if score >= best_score {
                    break;
                }
            }
            if score < best_score {
                best_score = score;
                score_trace.push(score);
                best = Some((model, score, sample.clone()));
                budget = adaptive_budget(
                    inliers as f64 / n as f64,
                    s,
                    config.confidence,
                    config.max_iterations.max(1),
                )
                .max(iterations.min(config.max_iterations));
            }
        }
    }
    let Some((model, score, sample)) = best else {
        return Err(RobustError::NoConsensus);
    };
    let residuals: Vec<f64> = (0..n).map(|i| problem.residual(&model, i)).collect();
    if residuals
        .iter()
        .filter(|e| e.is_finite() && **e * **e < t2)
        .count()
        < s
    {
        return Err(RobustError::NoConsensus);
    }
    let sigma_star = robust_scale(&residuals, &sample).unwrap_or(0.0);
    let cut = inlier_cut(sigma_star, config.inlier_threshold);
    let mask: Vec<bool> = residuals.iter().map(|&e| e.abs() < cut).collect();
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let (model, inlier_mask) = match problem.fit_refined(&idx, &model) {
        Some(refit) => {
            let refit_mask: Vec<bool> = (0..n)
                .map(|i| problem.residual(&refit, i).abs() < cut)
                .collect();
            if refit_mask.iter().filter(|&&b| b).count() >= s {
                (refit, refit_mask)
            } else {
                (model, mask)
            }
        }
        None => (model, mask),
    };
    if inlier_mask.iter().filter(|&&b| b).count() < s {
        return Err(RobustError::NoConsensus);
    }
    Ok(RobustFitResult {
        model,
        inlier_mask,
        score,
        sigma_star,
        best_sample: sample,
        iterations,
        score_trace,
    })
}

/// `theta sigma*`, kept inside `[1e-6 T, T]`.
pub fn inlier_cut(sigma_star: f64, threshold: f64) -> f64 {
    (INLIER_SCALE_FACTOR * sigma_star).clamp(1e-6 * threshold, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Line `y = a x + b` through 2D points.
    struct Line {
        pts: Vec<Vector2<f64>>,
    }

    impl MsacProblem for Line {
        type Model = (f64, f64);
        fn len(&self) -> usize {
            self.pts.len()
        }
        fn sample_size(&self) -> usize {
            2
        }
        fn fit_minimal(&self, s: &[usize]) -> Vec<(f64, f64)> {
            let (p, q) = (self.pts[s[0]], self.pts[s[1]]);
            if (q.x - p.x).abs() < 1e-12 {
                return vec![];
            }
            let a = (q.y - p.y) / (q.x - p.x);
            vec![(a, p.y - a * p.x)]
        }
        fn fit_refined(&self, idx: &[usize], _: &(f64, f64)) -> Option<(f64, f64)> {
            let n = idx.len() as f64;
            let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
            for &i in idx {
                let p = self.pts[i];
                sx += p.x;
                sy += p.y;
                sxx += p.x * p.x;
                sxy += p.x * p.y;
            }
            let a = (n * sxy - sx * sy) / (n * sxx - sx * sx);
            Some((a, (sy - a * sx) / n))
        }
        fn residual(&self, m: &(f64, f64), i: usize) -> f64 {
            let p = self.pts[i];
            p.y - (m.0 * p.x + m.1)
        }
        fn location(&self, i: usize) -> Option<Vector2<f64>> {
            Some(self.pts[i])
        }
    }

    #[test]
    fn clean_line_all_inliers() {
        let pts = (0..50)
            .map(|i| {
                let x = i as f64;
                Vector2::new(x, 2.0 * x + 1.0 + 0.01 * ((i * 7919) % 13) as f64 / 13.0)
            })
            .collect();
        let problem = Line { pts };
        let r = msac(&problem, &MsacConfig::new(1.0, 5.0, 3)).unwrap();
        assert!(r.inlier_mask.iter().all(|&b| b));
        let direct = problem
            .fit_refined(&(0..50).collect::<Vec<_>>(), &(0.0, 0.0))
            .unwrap();
        assert!((r.model.0 - direct.0).abs() < 1e-6 && (r.model.1 - direct.1).abs() < 1e-6);
        assert!(r.score_trace.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn too_few_data() {
        let problem = Line {
            pts: vec![Vector2::new(0.0, 0.0)],
        };
        assert_eq!(
            msac(&problem, &MsacConfig::new(1.0, 5.0, 3)).unwrap_err(),
            RobustError::InsufficientData { needed: 2, got: 1 }
        );
    }

    #[test]
    fn budget_formula() {
        assert_eq!(adaptive_budget(1.0, 7, 0.99, 1000), 1);
        assert_eq!(adaptive_budget(0.0, 7, 0.99, 1000), 1000);
        // 0.5^2 = 0.25: log(0.01)/log(0.75) = 16.008
        assert_eq!(adaptive_budget(0.5, 2, 0.99, 1000), 17);
    }
}
